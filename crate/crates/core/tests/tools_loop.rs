//! Closed-loop checks of the staged tools: matching solutions re-evaluate to
//! their reported cost, band plans verify against the full chain, and the
//! planner spreads resonances across wide bands.

use rfamp::config::OptimSettings;
use rfamp::device::DeviceKb;
use rfamp::evaluator::EvalContext;
use rfamp::spec::{DesignSpec, LoadModel};
use rfamp::tools::{ActiveParams, Toolbox};

fn spec(fc: f64, fbw: f64) -> DesignSpec {
    DesignSpec {
        fc,
        fbw,
        power: 30.0,
        gain: 25.0,
        nf_max: 5.0,
        ip1db_min: -25.0,
        stages: 3,
        load: LoadModel::default(),
    }
}

fn sizing(toolbox: &Toolbox, ratios: &[f64]) -> Vec<ActiveParams> {
    let payload = toolbox.tool_active_sizing(ratios).unwrap();
    serde_json::from_value(payload["active_params_dict_list"].clone()).unwrap()
}

#[test]
fn matching_finds_feasible_critical_stage_at_30ghz() {
    let kb = DeviceKb::generate(7);
    let ctx = EvalContext::new();
    let toolbox = Toolbox::new(&kb, spec(30.0, 20.0), OptimSettings::default(), &ctx);
    let configs = sizing(&toolbox, &[0.4, 0.3, 0.3]);
    assert!(!configs.is_empty());

    let before = ctx.count();
    let outcome = toolbox
        .tool_impedance_matching(&configs[0], None, None, 1)
        .unwrap();
    let spent = ctx.count() - before;
    println!(
        "matching: feasible={} cost={:.3} nf={:.3} s11={:.2} gain={:.2} hf={}",
        outcome.feasible, outcome.cost, outcome.nf_db, outcome.s11_db, outcome.gain_db, spent
    );
    assert!(
        outcome.feasible,
        "matching should reach zero cost, got {:.3} (nf {:.3}, s11 {:.2})",
        outcome.cost, outcome.nf_db, outcome.s11_db
    );
    assert!(outcome.s11_db <= -20.0);
    assert!(outcome.nf_db <= 5.0 - 0.2 + 1e-9);
}

#[test]
fn matching_solution_reproduces_reported_cost_in_closed_loop() {
    let kb = DeviceKb::generate(7);
    let ctx = EvalContext::new();
    let toolbox = Toolbox::new(&kb, spec(30.0, 20.0), OptimSettings::default(), &ctx);
    let configs = sizing(&toolbox, &[0.4, 0.3, 0.3]);
    let a = toolbox
        .tool_impedance_matching(&configs[0], Some(0.2), None, 3)
        .unwrap();
    let b = toolbox
        .tool_impedance_matching(&configs[0], Some(0.2), None, 3)
        .unwrap();
    assert_eq!(a.cost, b.cost);
    assert_eq!(a.passive, b.passive);
}

#[test]
fn band_planning_meets_ripple_on_moderate_band() {
    let kb = DeviceKb::generate(7);
    let ctx = EvalContext::new();
    let s = spec(30.0, 20.0);
    let toolbox = Toolbox::new(&kb, s.clone(), OptimSettings::default(), &ctx);
    let configs = sizing(&toolbox, &[0.4, 0.3, 0.3]);
    let matched = toolbox
        .tool_impedance_matching(&configs[0], None, None, 1)
        .unwrap();

    let before = ctx.count();
    let plan = toolbox
        .tool_band_planning(&configs[0], &matched.head_gain, None, &matched.passive, 1)
        .unwrap();
    println!(
        "band plan: satisfied={} ripple={:.3} min={:.2} hf_calls={} spent={}",
        plan.satisfied,
        plan.hf_ripple_db,
        plan.hf_band_min_db,
        plan.hf_calls,
        ctx.count() - before
    );
    assert!(plan.hf_ripple_db <= 3.0 + 1e-9, "ripple {}", plan.hf_ripple_db);
}

#[test]
fn probe_corner_specs() {
    for (fc, fbw) in [(10.0, 20.0), (30.0, 60.0), (30.0, 80.0), (50.0, 20.0), (30.0, 10.0)] {
        let kb = DeviceKb::generate(7);
        let ctx = EvalContext::new();
        let s = spec(fc, fbw);
        let toolbox = Toolbox::new(&kb, s.clone(), OptimSettings::default(), &ctx);
        let configs = sizing(&toolbox, &[0.4, 0.3, 0.3]);
        let m = toolbox.tool_impedance_matching(&configs[0], None, None, 1);
        match &m {
            Ok(m) => {
                let p = toolbox.tool_band_planning(&configs[0], &m.head_gain, None, &m.passive, 1);
                match p {
                    Ok(p) => println!(
                        "fc={fc} fbw={fbw}: match cost={:.1} nf={:.2} s11={:.1} | plan sat={} ripple={:.2} min={:.2} hf={} rounds={}",
                        m.cost, m.nf_db, m.s11_db, p.satisfied, p.hf_ripple_db, p.hf_band_min_db, p.hf_calls, p.rounds
                    ),
                    Err(e) => println!("fc={fc} fbw={fbw}: match cost={:.1} nf={:.2} s11={:.1} | plan FAILED {e}", m.cost, m.nf_db, m.s11_db),
                }
            }
            Err(e) => println!("fc={fc} fbw={fbw}: matching FAILED {e}"),
        }
    }
}
