//! Timing test in its own binary so no other test shares the CPU.

use imle_core::diffusion::{init_denoiser, reverse_sample_batch, DenoiserDims, NoiseSchedule};
use imle_core::metrics::sampling_frequency;
use imle_core::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn doubling_steps_doubles_latency() {
    let dims = DenoiserDims::navigation(20);
    let params = init_denoiser::<f32, _>(dims.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let c = Context::new(vec![0.0, 0.0], vec![8.0, 0.0], Vec::new()).unwrap();
    let latency = |steps: usize| {
        let sched = NoiseSchedule::linear(steps, 1e-4, 2e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        sampling_frequency(
            |_| reverse_sample_batch(&params, &dims, &c, &sched, 0.4, 16, &mut rng, None).map(drop),
            16,
            15,
        )
        .unwrap()
        .median_ms
    };
    let one = latency(50);
    let two = latency(100);
    let ratio = two / one;
    assert!((1.4..=2.6).contains(&ratio), "T=50 {one:.2} ms, T=100 {two:.2} ms, ratio {ratio:.2}");
}
