//! The im2col path must beat the direct path on long-sequence shapes while
//! matching it bitwise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdsed_core::tensor::{conv2d, conv2d_im2col, Pad, Tensor};

#[test]
fn im2col_is_faster_on_1024_row_dilated_conv() {
    // Kernel 7x7, dilation 10 over a 1024-row input.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (rows, width, k, dilation, out_ch) = (1024usize, 64usize, 7usize, 10usize, 32usize);
    let input = Tensor::new(
        vec![1, rows, width],
        (0..rows * width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let kernels = Tensor::new(
        vec![out_ch, 1, k, k],
        (0..out_ch * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let pad = Pad::symmetric(dilation * (k - 1) / 2, (k - 1) / 2);

    let time_min = |f: &dyn Fn() -> Tensor| {
        let mut best = f64::INFINITY;
        let mut out = None;
        for _ in 0..5 {
            let start = std::time::Instant::now();
            let r = f();
            best = best.min(start.elapsed().as_secs_f64());
            out = Some(r);
        }
        (best, out.unwrap())
    };
    let (direct_s, direct) = time_min(&|| conv2d(&input, &kernels, (dilation, 1), pad).unwrap());
    let (gemm_s, gemm) = time_min(&|| conv2d_im2col(&input, &kernels, (dilation, 1), pad).unwrap());

    assert_eq!(direct.shape(), &[out_ch, rows, width]);
    assert!(direct.max_abs_diff(&gemm) <= 1e-12);
    assert!(
        gemm_s < direct_s,
        "im2col ({gemm_s:.4}s) must be faster than direct ({direct_s:.4}s)"
    );
}
