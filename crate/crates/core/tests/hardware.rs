use semifreddo::engine::{Binding, ModelState, Tensor};
use semifreddo::freezing::{make_freeze_plan, FreezeScheme};
use semifreddo::hardware::{
    calibrate_cost_params, calibrated_default, compare_baseline, estimate_area, estimate_fps, reference_qgraph, CostParams,
    TARGET_AREA_MM2, VGA,
};
use semifreddo::quant::build_qgraph;
use semifreddo::topology::{build_graph, Core, NetworkSpec};

#[test]
fn reference_calibrates_to_four_mm2() {
    let spec = NetworkSpec::default_backbone();
    let qg = reference_qgraph(&spec).unwrap();
    let params = calibrated_default().unwrap();
    let area = estimate_area(&qg, &params).unwrap();
    assert!((area.total_mm2 - TARGET_AREA_MM2).abs() < 1e-9);
    let sum = area.frozen_scaler_mm2 + area.trainable_mult_mm2 + area.sram_mm2 + area.overhead_mm2;
    assert_eq!(area.total_mm2, sum);
    let cmp = compare_baseline(&area, &params);
    assert!((cmp.area_reduction - 3.75).abs() < 1e-9);
    assert_eq!(cmp.effective_throughput_ratio, 2.5);

    let again = calibrate_cost_params(&qg, &params, TARGET_AREA_MM2).unwrap();
    assert!((again.a_adder / params.a_adder - 1.0).abs() < 1e-12);
    assert!((again.a_mult / params.a_mult - 1.0).abs() < 1e-12);
    // only the area unit costs move
    assert_eq!(params.clock_hz, CostParams::default().clock_hz);
}

#[test]
fn freezing_more_never_costs_area() {
    let params = CostParams::default();
    assert!(params.freeze_margin() > 0.0);
    let graph = build_graph(&NetworkSpec::desk(10)).unwrap();
    let state = ModelState::init(&graph, 2);
    let calib = Tensor::filled(1, 1, 32, 32, 0.5);
    let areas: Vec<f64> = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
        .iter()
        .map(|&rho| {
            let plan = make_freeze_plan(&graph, FreezeScheme::Uniform { rho }, 3).unwrap();
            let qg = build_qgraph(&graph, &state, &plan, Binding::joint(Core::Trainable1), std::slice::from_ref(&calib)).unwrap();
            estimate_area(&qg, &params).unwrap().total_mm2
        })
        .collect();
    assert!(areas.windows(2).all(|w| w[1] < w[0]), "{areas:?}");
}

#[test]
fn fps_falls_with_repeats() {
    let spec = NetworkSpec::default_backbone();
    let params = CostParams::default();
    let mut last = f64::INFINITY;
    for r in 1..=6 {
        let t = estimate_fps(&spec, r, VGA, &params).unwrap();
        assert!(t.fps < last);
        assert!(t.tail_fraction > 0.0 && t.tail_fraction < 1.0);
        last = t.fps;
    }
    assert_eq!(estimate_fps(&spec, 1, VGA, &params).unwrap().fps, 200.0);
    let half = estimate_fps(&spec, 1, (320, 240), &params).unwrap().fps;
    assert_eq!(half, 800.0);
}
