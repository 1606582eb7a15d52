use criterion::{criterion_group, criterion_main, Criterion};
use sttsim_core::config::RunConfig;
use sttsim_core::sweep::{run_sweep, Axis, Execution};

fn small_config() -> RunConfig {
    RunConfig::parse(
        "trace.length = 20000\n\
         trace.working_set = 1M\n\
         sweep.policies = none,stall,bypass,checkpoint_bypass\n",
    )
    .expect("bench config")
}

fn policy_sweep(c: &mut Criterion) {
    let cfg = small_config();
    let trace = cfg.load_trace().expect("trace");
    let mut g = c.benchmark_group("policy_sweep");
    g.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        g.bench_function(name, |b| {
            b.iter(|| run_sweep(&cfg, &trace, Axis::Policy, exec).expect("sweep"))
        });
    }
    g.finish();
}

criterion_group!(benches, policy_sweep);
criterion_main!(benches);
