//! Directional finite-difference check of the loss gradient.

use groupreg::image::{Grid, Mask, VectorVolume};
use groupreg::loss::{common_mask_at, loss_and_gradient, total_loss_with_mask, Group, LossParams, Member};
use groupreg::synth::{make_group, make_phantom, GroupParams, Rng};

/// Smooth field with no zero regions, so that no sample point sits on a
/// grid node where trilinear interpolation has a kink.
pub fn generic_field(g: &Grid, amplitude: f64, seed: u64) -> VectorVolume {
    let mut rng = Rng::new(seed);
    let mut coef = [[0.0; 4]; 3];
    for c in coef.iter_mut() {
        for x in c.iter_mut() {
            *x = rng.uniform_in(0.2, 1.0);
        }
    }
    VectorVolume::from_fn(g.clone(), |[x, y, z]| {
        let (x, y, z) = (x as f64, y as f64, z as f64);
        coef.map(|k| amplitude * (0.5 * k[0] * (k[1] * x + k[2] * y - k[3] * z + k[0] * 7.0).sin() + 0.3 * k[3]))
    })
    .unwrap()
}

/// Small synthetic group plus velocities away from the identity.
pub fn fd_case(seed: u64, masked: bool) -> (Group, Vec<VectorVolume>) {
    let phantom = make_phantom([12; 3], [1.0; 3], seed).unwrap();
    let params = GroupParams {
        n: 3,
        amplitude_mm: 1.0,
        smoothness_sigma_mm: 3.0,
        ..GroupParams::default()
    };
    let synthetic = make_group(&phantom, &params, seed).unwrap();
    // noise-free images: noise only adds slope jumps between trilinear cells
    let members = synthetic
        .group
        .members()
        .iter()
        .zip(&synthetic.clean_images)
        .map(|(m, clean)| Member {
            image: clean.clone(),
            mask: if masked { m.mask.clone() } else { Mask::full(m.mask.grid().clone()) },
            labels: None,
        })
        .collect();
    let g = phantom.image.grid().clone();
    let velocities = (0..3).map(|k| generic_field(&g, 1.0, 1000 + 10 * seed + k)).collect();
    (Group::new(members).unwrap(), velocities)
}

pub fn dot(a: &[VectorVolume], b: &[VectorVolume]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum::<f64>())
        .sum()
}

pub fn normalized(d: Vec<VectorVolume>) -> Vec<VectorVolume> {
    let norm = dot(&d, &d).sqrt();
    d.iter().map(|x| x.scaled(1.0 / norm)).collect()
}

/// Worst relative error between the directional derivative from the
/// analytic gradient and a central difference of the loss with step 1e-4
/// along unit directions: the gradient itself and two smooth random ones.
/// The common mask is held at its value at `v`.
pub fn check_gradient(group: &Group, v: &[VectorVolume], params: &LossParams, seed: u64) -> f64 {
    let (_, grad) = loss_and_gradient(group, v, params).unwrap();
    let mask = common_mask_at(group, v, params.squaring_steps).unwrap();
    let g = group.grid().clone();
    let mut directions = vec![normalized(grad.clone())];
    for k in 0..2 {
        directions.push(normalized((0..3).map(|j| generic_field(&g, 1.0, 77 + 7 * seed + 3 * k + j)).collect()));
    }
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for d in &directions {
        let loss_at = |t: f64| {
            let moved: Vec<VectorVolume> = v.iter().zip(d).map(|(a, b)| a.add(&b.scaled(t)).unwrap()).collect();
            total_loss_with_mask(group, &moved, params, &mask).unwrap().total
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let analytic = dot(&grad, d);
        worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()));
    }
    worst
}
