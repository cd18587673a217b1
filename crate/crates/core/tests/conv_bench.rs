//! Manual throughput probe for the convolution kernels. Run with
//! `cargo test -p stpuzzle-core --test conv_bench -- --ignored --nocapture`.

use std::time::Instant;

use stpuzzle_core::ops::{conv3d_backward, conv3d_forward, ConvSpec};
use stpuzzle_core::tensor::Tensor;

fn run_case(
    label: &str,
    n: usize,
    cin: usize,
    cout: usize,
    vol: (usize, usize, usize),
    stride: (usize, usize, usize),
) {
    let spec = ConvSpec {
        in_channels: cin,
        out_channels: cout,
        kernel: (3, 3, 3),
        stride,
        padding: (1, 1, 1),
    };
    let x = Tensor::<f32>::from_fn(&[n, cin, vol.0, vol.1, vol.2], |i| {
        ((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5
    });
    let w = Tensor::<f32>::from_fn(&spec.weight_shape(), |i| {
        ((i * 40503) % 1000) as f32 / 5000.0 - 0.1
    });
    let y = conv3d_forward(&x, &w, None, &spec).unwrap();
    let go = Tensor::<f32>::filled(y.shape(), 0.01);

    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let y = conv3d_forward(&x, &w, None, &spec).unwrap();
        std::hint::black_box(y);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    let t1 = Instant::now();
    for _ in 0..reps {
        let g = conv3d_backward(&x, &w, false, &spec, &go).unwrap();
        std::hint::black_box(g);
    }
    let bwd = t1.elapsed().as_secs_f64() / reps as f64;
    let macs = (cout * cin * 27 * y.numel() / cout) as f64;
    println!(
        "{label}: fwd {:.2} ms ({:.2} GMAC/s), bwd {:.2} ms",
        fwd * 1e3,
        macs / fwd / 1e9,
        bwd * 1e3
    );
}

#[test]
#[ignore]
fn conv_throughput() {
    // Tiny-variant shapes at a 32-crop (8-sample) pretraining batch.
    run_case("conv1 3->8 s122", 32, 3, 8, (4, 20, 20), (1, 2, 2));
    run_case("stage1 8->8 s1", 32, 8, 8, (4, 10, 10), (1, 1, 1));
    run_case("stage2 8->16 s2", 32, 8, 16, (4, 10, 10), (2, 2, 2));
    run_case("stage2 16->16 s1", 32, 16, 16, (2, 5, 5), (1, 1, 1));
}
