use ftfl_core::nn::*;
use std::time::Instant;

fn main() {
    for hidden in [32usize, 64, 128, 256] {
        let spec = MlpSpec::new(4, vec![hidden, hidden], 1, Activation::Relu, OutputActivation::Identity).unwrap();
        let mut params = ParamSet::zeros(spec.param_count()); for (i, v) in params.values.iter_mut().enumerate() { *v = ((i as f64)*0.37).sin()*0.1; } let params = params;
        let b = 256usize;
        let x: Vec<f64> = (0..b*4).map(|i| (i as f64 * 0.01).sin()).collect();
        let mut ws = Workspace::new(&spec, b);
        let mut grads = ParamSet::zeros(spec.param_count());
        let up: Vec<f64> = vec![1.0; b];
        // warmup
        for _ in 0..10 {
            forward_batch(&spec, &params, &x, b, &mut ws);
            backward_batch(&spec, &params, &mut ws, &up, Some(&mut grads), None);
        }
        let iters = 2000;
        let t0 = Instant::now();
        for _ in 0..iters {
            forward_batch(&spec, &params, &x, b, &mut ws);
            backward_batch(&spec, &params, &mut ws, &up, Some(&mut grads), None);
        }
        let dt = t0.elapsed().as_secs_f64();
        // MACs: fwd = B*(4*h + h*h + h), bwd ~ 2x fwd
        let fwd = (b * (4*hidden + hidden*hidden + hidden)) as f64;
        let macs = iters as f64 * fwd * 3.0;
        println!("hidden {hidden:4}: {:.2} GMAC/s  ({:.1} us/iter)", macs / dt / 1e9, dt / iters as f64 * 1e6);
    }
}
