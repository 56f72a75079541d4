//! Raw sgemm layout probe; run with
//! `cargo test -p raspdg-core --test gemm_bench -- --ignored --nocapture`.

use std::time::Instant;

fn bench_gemm(m: usize, k: usize, n: usize, reps: usize, label: &str) {
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut c = vec![0.0f32; m * n];
    // warmup
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
    let t0 = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let macs = (m * k * n) as f64;
    println!("{label}: ({m},{k},{n}) {:.3} ms -> {:.1} GMAC/s", dt * 1e3, macs / dt / 1e9);
    std::hint::black_box(c[0]);
}

#[test]
#[ignore]
fn gemm_layouts() {
    bench_gemm(512, 512, 512, 8, "square peak");
    bench_gemm(16, 144, 32768, 8, "B1 batched  (Cout,K)x(K,N*HW)");
    bench_gemm(32768, 144, 16, 8, "B1 batched  (N*HW,K)x(K,Cout)");
    bench_gemm(16, 144, 1024, 64, "B1 per-n    (Cout,K)x(K,HW)");
    bench_gemm(1024, 144, 16, 64, "B1 per-n    (HW,K)x(K,Cout)");
    bench_gemm(64, 576, 2048, 16, "B4 batched  (Cout,K)x(K,N*HW)");
    bench_gemm(2048, 576, 64, 16, "B4 batched  (N*HW,K)x(K,Cout)");
    bench_gemm(32, 27, 32768, 8, "stem batched");
}

#[test]
#[ignore]
fn gemm_backward_shapes() {
    bench_gemm(16, 1024, 144, 64, "B1 dW per-n");
    bench_gemm(16, 32768, 144, 8, "B1 dW batched");
    bench_gemm(144, 16, 1024, 64, "B1 dcol per-n");
    bench_gemm(144, 16, 32768, 8, "B1 dcol batched");
    bench_gemm(144, 32, 8192, 8, "B2c1 dcol batched");
    bench_gemm(576, 64, 2048, 16, "B4 dcol batched");
    bench_gemm(64, 2048, 576, 16, "B4 dW batched");
    bench_gemm(16, 1024, 27, 64, "stem dW per-n");
    bench_gemm(16, 32768, 27, 8, "stem dW batched");
}
