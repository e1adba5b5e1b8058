use groupreg::metrics::{CLASS_CSF, CLASS_GM, CLASS_TUMOR, CLASS_WM};
use groupreg::synth::{make_group, make_phantom, GroupParams, NOISE_SD};
use groupreg::transform::{exponentiate, jacobian_determinant, warp};
use proptest::prelude::*;

const RANGE: f64 = 100.0;

#[test]
fn class_means_are_separated_by_five_noise_sd() {
    let p = make_phantom([48; 3], [1.0; 3], 3).unwrap();
    let mean_of = |class: u32| {
        let vals: Vec<f64> = (0..p.image.data().len())
            .filter(|&i| p.labels.data()[i] == class as f64)
            .map(|i| p.image.data()[i])
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let means: Vec<f64> = [0, CLASS_CSF, CLASS_GM, CLASS_WM, CLASS_TUMOR].iter().map(|&c| mean_of(c)).collect();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            assert!((means[i] - means[j]).abs() >= 5.0 * NOISE_SD, "classes {i}/{j}: {means:?}");
        }
    }
    // measured noise in the background, where the clean image is exactly 0
    let bg: Vec<f64> = (0..p.image.data().len())
        .filter(|&i| p.clean.data()[i] == 0.0)
        .map(|i| p.image.data()[i])
        .collect();
    let sd = (bg.iter().map(|v| v * v).sum::<f64>() / bg.len() as f64).sqrt();
    assert!((sd - NOISE_SD).abs() < 0.05 * NOISE_SD, "{sd}");
}

#[test]
fn members_warp_back_onto_the_phantom() {
    let p = make_phantom([48; 3], [1.0; 3], 8).unwrap();
    let params = GroupParams {
        n: 3,
        amplitude_mm: 3.0,
        smoothness_sigma_mm: 6.0,
        ..GroupParams::default()
    };
    let s = make_group(&p, &params, 8).unwrap();
    for (i, m) in s.group.members().iter().enumerate() {
        let back = exponentiate(&s.true_velocities[i].scaled(-1.0), 7).unwrap();
        let r = warp(&m.image, &back).unwrap();
        let (mut err, mut count) = (0.0, 0);
        for k in 0..r.data().len() {
            if p.head.data()[k] {
                err += (r.data()[k] - p.clean.data()[k]).abs();
                count += 1;
            }
        }
        let mae = err / count as f64;
        assert!(mae < 0.01 * RANGE, "member {i}: {mae}");
    }
}

#[test]
fn ground_truth_is_centred_and_fold_free() {
    let p = make_phantom([48; 3], [1.0; 3], 2).unwrap();
    let params = GroupParams {
        n: 4,
        amplitude_mm: 3.0,
        smoothness_sigma_mm: 6.0,
        tumor_growth_mm: 2.0,
        intensity_shift: 0.2,
    };
    let s = make_group(&p, &params, 2).unwrap();
    for k in 0..p.image.data().len() {
        for c in 0..3 {
            let sum: f64 = s.true_velocities.iter().map(|v| v.data()[k][c]).sum();
            assert!(sum.abs() <= 1e-12);
        }
    }
    for v in &s.true_velocities {
        let jac = jacobian_determinant(&exponentiate(v, 7).unwrap()).unwrap();
        assert!(jac.data().iter().all(|&j| j > 0.0));
    }
}

#[test]
fn tumor_grows_and_brightens_over_time() {
    let p = make_phantom([40; 3], [1.0; 3], 6).unwrap();
    let params = GroupParams {
        n: 3,
        amplitude_mm: 0.0,
        smoothness_sigma_mm: 6.0,
        tumor_growth_mm: 3.0,
        intensity_shift: 0.4,
    };
    let s = make_group(&p, &params, 6).unwrap();
    let stats: Vec<(usize, f64)> = s
        .group
        .members()
        .iter()
        .map(|m| {
            let l = m.labels.as_ref().unwrap();
            let idx: Vec<usize> = (0..l.data().len()).filter(|&i| l.data()[i] == CLASS_TUMOR as f64).collect();
            let mean = idx.iter().map(|&i| m.image.data()[i]).sum::<f64>() / idx.len() as f64;
            (idx.len(), mean)
        })
        .collect();
    assert!(stats[0].0 < stats[1].0 && stats[1].0 < stats[2].0, "{stats:?}");
    assert!(stats[2].1 - stats[0].1 > 0.3 * RANGE, "{stats:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn phantom_is_deterministic_with_all_classes(seed in any::<u64>()) {
        let a = make_phantom([24; 3], [1.0; 3], seed).unwrap();
        let b = make_phantom([24; 3], [1.0; 3], seed).unwrap();
        prop_assert_eq!(&a, &b);
        for c in 0..=4 {
            prop_assert!(a.labels.data().contains(&(c as f64)));
        }
    }

    #[test]
    fn masks_exclude_the_tumor(seed in 0u64..1000) {
        let p = make_phantom([24; 3], [1.0; 3], seed).unwrap();
        let s = make_group(&p, &GroupParams { amplitude_mm: 2.0, smoothness_sigma_mm: 5.0, ..GroupParams::default() }, seed).unwrap();
        for m in s.group.members() {
            let l = m.labels.as_ref().unwrap();
            for k in 0..l.data().len() {
                if m.mask.data()[k] {
                    prop_assert!(l.data()[k] != 0.0 && l.data()[k] != CLASS_TUMOR as f64);
                }
            }
        }
    }
}
