use std::time::Instant;
use twistnet::tensor::rng::Rng;
fn main() {
    let mut rng = Rng::new(1);
    // conv-like shapes from the micro network (m=c_out, k=c_in*9, n=batch*hw)
    for &(m, k, n) in &[(16usize, 147usize, 32768usize), (16, 144, 8192), (32, 288, 2048), (64, 576, 512), (128, 1152, 128)] {
        let a: Vec<f32> = (0..m * k).map(|_| rng.normal() as f32).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.normal() as f32).collect();
        let mut c = vec![0.0f32; m * n];
        let flops = 2.0 * (m * k * n) as f64;
        let reps = ((2e9 / flops) as usize).max(3);
        let t0 = Instant::now();
        for _ in 0..reps {
            twistnet::ops::gemm::gemm_nn_f32(m, k, n, &a, &b, &mut c);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("nn {m}x{k}x{n}: {:.2} GFLOP/s", flops * reps as f64 / dt / 1e9);
        let bt: Vec<f32> = (0..n * k).map(|_| rng.normal() as f32).collect();
        let t0 = Instant::now();
        for _ in 0..reps {
            twistnet::ops::gemm::gemm_nt_f32(m, k, n, &a, &bt, &mut c);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("nt {m}x{k}x{n}: {:.2} GFLOP/s", flops * reps as f64 / dt / 1e9);
    }
}
