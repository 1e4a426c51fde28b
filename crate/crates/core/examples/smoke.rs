use std::sync::Arc;
use rfamp::agents::{run_design, Mode, ScriptedPolicy};
use rfamp::config::RunConfig;
use rfamp::device::DeviceKb;
use rfamp::spec::{DesignSpec, LoadModel};
fn main() {
    let kb = Arc::new(DeviceKb::generate(7));
    for (fc, fbw, gain) in [(30.0, 60.0, 20.0), (30.0, 60.0, 22.0), (30.0, 80.0, 18.0)] {
        let spec = DesignSpec { fc, fbw, power: 30.0, gain, nf_max: 5.0, ip1db_min: -25.0, stages: 3, load: LoadModel::default() };
        let config = RunConfig::default();
        let mut passes = 0;
        let mut hf = vec![];
        let t0 = std::time::Instant::now();
        for seed in [11u64, 22, 33, 44, 55] {
            let kb2 = kb.clone();
            let knobs = config.backtrack;
            let out = run_design(&spec, &kb, Mode::AutonomousSearch,
                &move || Box::new(ScriptedPolicy::new(kb2.clone(), knobs)) as Box<dyn rfamp::agents::Policy>,
                seed, &config, None, "smoke").unwrap();
            if out.success { passes += 1; }
            hf.push(out.hf_evals);
        }
        println!("fc={fc} fbw={fbw} gain={gain}: pass {passes}/5 hf={hf:?} wall={:.1}s", t0.elapsed().as_secs_f64());
    }
}
