//! Synthetic feature/label generator with planted inter-class temporal
//! dependencies: each dependent class onsets only within a bounded gap after
//! its trigger class ends, so conditioning on past predictions carries real
//! signal. Feature-space mixtures, no audio synthesis.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{DataError, Result, SequenceDataset, SequenceItem, Split};

/// `dependent` onsets only in `(trigger offset) + [0, max_gap]` frames.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DependencyRule {
    pub trigger: usize,
    pub dependent: usize,
    pub max_gap: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub features: usize,
    pub seq_len: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub test_sequences: usize,
    /// Spontaneous events per non-dependent class per sequence (upper bound;
    /// the realized count is uniform in `1..=events_per_class`).
    pub events_per_class: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub dependencies: Vec<DependencyRule>,
    /// Maximum simultaneously active classes per frame.
    pub polyphony_cap: usize,
    /// Feature template amplitude for trigger/spontaneous classes.
    pub base_gain: f64,
    /// Feature template amplitude for dependent classes; keeping this low
    /// makes the dependent classes hard to spot from the input alone.
    pub dependent_gain: f64,
    pub noise_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            features: 8,
            seq_len: 256,
            train_sequences: 16,
            val_sequences: 4,
            test_sequences: 4,
            events_per_class: 3,
            min_duration: 8,
            max_duration: 24,
            dependencies: vec![
                DependencyRule { trigger: 0, dependent: 1, max_gap: 8 },
                DependencyRule { trigger: 2, dependent: 3, max_gap: 8 },
            ],
            polyphony_cap: 5,
            base_gain: 3.0,
            dependent_gain: 0.8,
            noise_level: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    class: usize,
    onset: usize,
    /// Exclusive end frame.
    end: usize,
}

/// Topological order of classes under the dependency rules; errors on cycles.
fn placement_order(config: &SynthConfig) -> Result<Vec<usize>> {
    let c = config.classes;
    for rule in &config.dependencies {
        if rule.trigger >= c || rule.dependent >= c {
            return Err(DataError::BadGeneratorConfig(format!(
                "rule {} -> {} references a class outside 0..{c}",
                rule.trigger, rule.dependent
            )));
        }
        if rule.trigger == rule.dependent {
            return Err(DataError::DependencyCycle { class: rule.trigger });
        }
    }
    // Kahn's algorithm over the trigger -> dependent edges.
    let mut indegree = vec![0usize; c];
    for rule in &config.dependencies {
        indegree[rule.dependent] += 1;
    }
    let mut queue: Vec<usize> = (0..c).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(c);
    while let Some(&class) = queue.first() {
        queue.remove(0);
        order.push(class);
        for rule in &config.dependencies {
            if rule.trigger == class {
                indegree[rule.dependent] -= 1;
                if indegree[rule.dependent] == 0 {
                    queue.push(rule.dependent);
                }
            }
        }
    }
    if order.len() != c {
        let class = (0..c).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(DataError::DependencyCycle { class });
    }
    Ok(order)
}

fn is_dependent(config: &SynthConfig, class: usize) -> bool {
    config.dependencies.iter().any(|r| r.dependent == class)
}

/// Try to place an event; respects the polyphony cap and keeps events of the
/// same class separated by at least two frames so label onsets/offsets stay
/// aligned with the generated events. Returns the realized event, if any.
fn place_event(
    active: &mut [Vec<bool>], // [T][C]
    polyphony: &mut [usize],  // [T]
    cap: usize,
    class: usize,
    onset: usize,
    duration: usize,
    t_len: usize,
) -> Option<Event> {
    if onset >= t_len {
        return None;
    }
    // Same-class separation: refuse onsets adjacent to existing activity.
    let guard_lo = onset.saturating_sub(1);
    if active[guard_lo][class] || active[onset][class] {
        return None;
    }
    if polyphony[onset] >= cap {
        return None;
    }
    let mut end = onset;
    while end < t_len.min(onset + duration) {
        if polyphony[end] >= cap || (end > onset && active[end][class]) {
            break;
        }
        end += 1;
    }
    // Growing flush against a later same-class event would merge the two
    // label runs and hide this event's offset; leave a one-frame gap.
    if end > onset && end < t_len && active[end][class] {
        end -= 1;
    }
    if end == onset {
        return None;
    }
    for t in onset..end {
        active[t][class] = true;
        polyphony[t] += 1;
    }
    Some(Event { class, onset, end })
}

fn generate_sequence(
    config: &SynthConfig,
    order: &[usize],
    rng: &mut ChaCha8Rng,
    id: String,
    split: Split,
) -> SequenceItem {
    let (t_len, c, f) = (config.seq_len, config.classes, config.features);
    let mut active = vec![vec![false; c]; t_len];
    let mut polyphony = vec![0usize; t_len];
    let mut events: Vec<Event> = Vec::new();

    for &class in order {
        if is_dependent(config, class) {
            // Spawn only from realized trigger offsets, inside the gap.
            let rules: Vec<&DependencyRule> = config
                .dependencies
                .iter()
                .filter(|r| r.dependent == class)
                .collect();
            for rule in rules {
                let trigger_ends: Vec<usize> = events
                    .iter()
                    .filter(|e| e.class == rule.trigger)
                    .map(|e| e.end)
                    .collect();
                for end in trigger_ends {
                    let onset = end + rng.gen_range(0..=rule.max_gap);
                    let duration = rng.gen_range(config.min_duration..=config.max_duration);
                    if let Some(ev) = place_event(
                        &mut active,
                        &mut polyphony,
                        config.polyphony_cap,
                        class,
                        onset,
                        duration,
                        t_len,
                    ) {
                        events.push(ev);
                    }
                }
            }
        } else {
            let count = rng.gen_range(1..=config.events_per_class);
            for _ in 0..count {
                let onset = rng.gen_range(0..t_len);
                let duration = rng.gen_range(config.min_duration..=config.max_duration);
                if let Some(ev) = place_event(
                    &mut active,
                    &mut polyphony,
                    config.polyphony_cap,
                    class,
                    onset,
                    duration,
                    t_len,
                ) {
                    events.push(ev);
                }
            }
        }
    }

    // Feature templates: one spectral bump per class, dependent classes
    // rendered faint, plus a noise floor.
    let mut features = Tensor::zeros(&[t_len, f]);
    for t in 0..t_len {
        for j in 0..f {
            features.set2(t, j, config.noise_level * rng.gen_range(-1.0..1.0));
        }
    }
    for ev in &events {
        let gain = if is_dependent(config, ev.class) {
            config.dependent_gain
        } else {
            config.base_gain
        };
        let center = (ev.class as f64 + 0.5) * f as f64 / c as f64;
        let width = (f as f64 / (2.0 * c as f64)).max(0.6);
        for t in ev.onset..ev.end {
            for j in 0..f {
                let d = (j as f64 - center) / width;
                let bump = gain * (-0.5 * d * d).exp();
                features.set2(t, j, features.at2(t, j) + bump);
            }
        }
    }

    let mut labels = Tensor::zeros(&[t_len, c]);
    for (t, row) in active.iter().enumerate() {
        for (class, &on) in row.iter().enumerate() {
            if on {
                labels.set2(t, class, 1.0);
            }
        }
    }

    SequenceItem {
        id,
        features,
        labels,
        split,
        valid_len: t_len,
    }
}

/// Deterministic synthetic dataset with the configured dependency structure.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SequenceDataset> {
    if config.classes == 0 || config.features == 0 || config.seq_len == 0 {
        return Err(DataError::BadGeneratorConfig(
            "classes, features, seq_len must be positive".into(),
        ));
    }
    if config.min_duration == 0 || config.min_duration > config.max_duration {
        return Err(DataError::BadGeneratorConfig(
            "need 0 < min_duration <= max_duration".into(),
        ));
    }
    if config.polyphony_cap == 0 {
        return Err(DataError::BadGeneratorConfig("polyphony_cap must be positive".into()));
    }
    let order = placement_order(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    let splits = [
        (Split::Train, config.train_sequences),
        (Split::Val, config.val_sequences),
        (Split::Test, config.test_sequences),
    ];
    for (split, count) in splits {
        for i in 0..count {
            let id = format!("{split}.{i:05}");
            items.push(generate_sequence(config, &order, &mut rng, id, split));
        }
    }
    let class_names = (0..config.classes).map(|i| format!("class_{i:02}")).collect();
    let dataset = SequenceDataset { items, class_names };
    dataset.validate()?;
    Ok(dataset)
}

/// Scan labels for dependency violations: every onset of a dependent class
/// must fall within `[offset, offset + max_gap]` of some trigger offset.
/// Returns (onsets checked, violations).
pub fn scan_dependency(
    dataset: &SequenceDataset,
    rule: &DependencyRule,
) -> (usize, usize) {
    let mut checked = 0;
    let mut violations = 0;
    for item in &dataset.items {
        let t_len = item.valid_len;
        let onsets: Vec<usize> = (0..t_len)
            .filter(|&t| {
                item.labels.at2(t, rule.dependent) == 1.0
                    && (t == 0 || item.labels.at2(t - 1, rule.dependent) == 0.0)
            })
            .collect();
        let offsets: Vec<usize> = (1..=t_len)
            .filter(|&t| {
                item.labels.at2(t - 1, rule.trigger) == 1.0
                    && (t == t_len || item.labels.at2(t, rule.trigger) == 0.0)
            })
            .collect();
        for onset in onsets {
            checked += 1;
            let ok = offsets
                .iter()
                .any(|&off| onset >= off && onset - off <= rule.max_gap);
            if !ok {
                violations += 1;
            }
        }
    }
    (checked, violations)
}
