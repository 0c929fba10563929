use entroflow_demo::{entropy_curve, flow_frames, reincarnation, Scenario};

fn ou() -> Scenario {
    Scenario {
        double_well: false,
        mean: 1.0,
        variance: 1.0,
        horizon: 0.5,
        resolution: 512,
    }
}

#[test]
fn frames_span_the_horizon() {
    let f = flow_frames(ou(), 6).unwrap();
    assert_eq!(f.frames.len(), 6);
    assert_eq!(f.times.first(), Some(&0.0));
    assert!((f.times[5] - 0.5).abs() < 1e-12);
    assert!(f.frames.iter().all(|p| p.len() == f.x.len()));
    assert_eq!(f.q.len(), 512);
}

#[test]
fn entropy_curve_sits_between_its_bounds() {
    let c = entropy_curve(ou()).unwrap();
    let exp = c.exponential.as_ref().unwrap();
    for k in 0..c.times.len() {
        assert!(c.pinsker[k] <= c.entropy[k] + 1e-9);
        assert!(c.entropy[k] <= exp[k] * 1.01);
    }
    assert!((c.entropy[0] - 1.1534264097200273).abs() < 2e-3);

    let well = entropy_curve(Scenario {
        double_well: true,
        variance: 0.04,
        ..ou()
    })
    .unwrap();
    assert!(well.exponential.is_none());
    assert!(well.entropy.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn reversed_ensemble_lands_on_later_marginal() {
    let r = reincarnation(ou(), 20_000, 64, 5).unwrap();
    assert!(r.tv < 0.05, "tv {}", r.tv);
    assert!((r.entropy - 0.3951883179980521).abs() < 2e-3);
    assert!((r.cost - r.entropy).abs() <= 4.0 * r.cost_se);
    let mass: f64 = r.reversed.iter().sum::<f64>() * (r.centers[1] - r.centers[0]);
    assert!((mass - 1.0).abs() < 0.02);
}

#[test]
fn bad_scenarios_are_errors() {
    assert!(flow_frames(Scenario { variance: -1.0, ..ou() }, 4).is_err());
    assert!(entropy_curve(Scenario { resolution: 4, ..ou() }).is_err());
}
