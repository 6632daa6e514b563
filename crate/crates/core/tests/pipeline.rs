use simkrig::emulator::{CurvePredictor, Family};
use simkrig::synth::co2_box;
use simkrig::{
    generate_functional_sim, lhd_sample, maximin_lhd, scale_to_box, train, train_emulator, validate, Emulator, SimSpec,
    SurrogateConfig,
};

fn data(j: usize, noise: f64) -> (simkrig::DesignMatrix, simkrig::CurveSet) {
    let d = scale_to_box(&maximin_lhd(25, 3, 11, 10).unwrap(), &co2_box()).unwrap();
    let y = generate_functional_sim(&SimSpec::co2_default(j, noise, 11), &d).unwrap();
    (d, y)
}

#[test]
fn loo_q2_of_each_family_is_high() {
    let (d, y) = data(41, 0.0);
    let s = train(&d, &y, &SurrogateConfig::default()).unwrap();
    for (f, q2) in [Family::Alpha, Family::Theta, Family::V].into_iter().zip(s.loo_q2()) {
        let q2 = q2.unwrap_or_else(|| panic!("{} unexpectedly fixed", f.name()));
        assert!(q2 > 0.9, "{}: {q2}", f.name());
    }
}

#[test]
fn noiseless_held_out_q2() {
    let (d, y) = data(41, 0.0);
    let test = scale_to_box(&lhd_sample(15, 3, 12).unwrap(), &co2_box()).unwrap();
    let yt = generate_functional_sim(&SimSpec::co2_default(41, 0.0, 12), &test).unwrap();
    let s = train(&d, &y, &SurrogateConfig::default()).unwrap();
    let r = validate(&s, &test, &yt).unwrap();
    assert!(r.mean_q2() > 0.95, "{}", r.mean_q2());
    // The box is the training design's bounding box, so only edge points may be flagged.
    assert!(r.out_of_box.iter().filter(|o| **o).count() < 15);
    assert!(!s.predict_curve(&d.row(0)).unwrap().out_of_box);
}

#[test]
fn emulator_json_round_trip_predicts_identically() {
    let (d, y) = data(31, 0.01);
    let e = train_emulator(&d, &y, &SurrogateConfig::default()).unwrap();
    let back = Emulator::from_json(&e.to_json().unwrap()).unwrap();
    // Factorizations are recomputed on load, so agreement is to rounding only.
    let x = d.row(3);
    let (a, b) = (e.predict_curve(&x).unwrap().values, back.predict_curve(&x).unwrap().values);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() <= 1e-10 * scale));
}

#[test]
fn windowed_emulator_covers_full_grid() {
    let (d, y) = data(60, 0.0);
    let cfg = SurrogateConfig {
        time_windows: 3,
        ..SurrogateConfig::default()
    };
    let e = train_emulator(&d, &y, &cfg).unwrap();
    assert!(matches!(e, Emulator::Windowed(_)));
    assert_eq!(e.t_grid().len(), 60);
    assert_eq!(e.predict_curve(&d.row(0)).unwrap().values.len(), 60);
}
