use flowlab::fields::{make_field_set, FieldSetSpec, VectorFieldSet};
use flowlab::flow::{evolve, Integrator, Scheme};
use flowlab::noise::NoisePath;
use rayon::prelude::*;

fn demo_set() -> VectorFieldSet {
    make_field_set(&FieldSetSpec::random(2, 3, 1, 42, true)).unwrap()
}

#[test]
fn divergence_free_flow_preserves_volume() {
    let set = demo_set();
    let worst = (0..100u64)
        .into_par_iter()
        .map(|r| {
            let path = NoisePath::new(17, r, 3, 1e-3, 0, 10_000).unwrap();
            let mut integ = Integrator::new(set.clone(), Scheme::Heun);
            let mut st = integ.initial_state(&[vec![0.25, 0.5]], 0.0, 1e-3, Some(2)).unwrap();
            evolve(&mut integ, &mut st, &path, 10.0).unwrap();
            let f = st.frames.unwrap();
            assert!(f.det_sign(0) > 0.0);
            (f.log_det(0).unwrap().exp() - 1.0).abs()
        })
        .reduce(|| 0.0, f64::max);
    assert!(worst <= 0.01, "max |det - 1| = {worst}");
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn heun_and_ito_euler_agree_in_distribution() {
    let set = make_field_set(&FieldSetSpec {
        drift_amplitude: 0.3,
        ..FieldSetSpec::random(2, 3, 1, 5, true)
    })
    .unwrap();
    let n = 10_000u64;
    let sample = |scheme: Scheme, offset: u64| -> Vec<Vec<f64>> {
        (0..n)
            .into_par_iter()
            .map(|r| {
                let path = NoisePath::new(23, offset + r, 3, 1e-2, 0, 500).unwrap();
                let mut integ = Integrator::new(set.clone(), scheme);
                let mut st = integ.initial_state(&[vec![0.2, 0.6]], 0.0, 1e-2, None).unwrap();
                evolve(&mut integ, &mut st, &path, 5.0).unwrap();
                st.points[0].lift.clone()
            })
            .collect()
    };
    let a = sample(Scheme::Heun, 0);
    let b = sample(Scheme::ItoEuler, n);
    for i in 0..2 {
        let xa: Vec<f64> = a.iter().map(|p| p[i]).collect();
        let xb: Vec<f64> = b.iter().map(|p| p[i]).collect();
        let (ma, va) = mean_var(&xa);
        let (mb, vb) = mean_var(&xb);
        let se_mean = (va / n as f64 + vb / n as f64).sqrt();
        assert!((ma - mb).abs() < 3.0 * se_mean, "mean {ma} vs {mb}");
        // variance of the sample variance from the fourth central moment
        let m4 = |xs: &[f64], m: f64| xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
        let se_var = ((m4(&xa, ma) - va * va) / n as f64 + (m4(&xb, mb) - vb * vb) / n as f64).sqrt();
        assert!((va - vb).abs() < 3.0 * se_var, "variance {va} vs {vb}");
    }
}
