use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use groupreg::image::{Grid, Mask, VectorVolume, Volume};
use groupreg::io::nifti::{self, Datatype, INTENT_DISPLACEMENT};
use groupreg::loss::{Group, Member};
use groupreg::metrics::{evaluate_group, EvaluationInput, MetricsReport, CLASS_CSF, CLASS_GM, CLASS_WM};
use groupreg::transform::{exponentiate, DisplacementField};

fn groupreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groupreg"))
        .args(args)
        .env("GROUPREG_THREADS", "1")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--dims", "24", "--n", "3", "--amplitude", "2", "--smoothness", "5", "--out", s(dir)];
    args.extend_from_slice(extra);
    groupreg(&args)
}

fn quick_config(dir: &Path, iterations: usize) -> PathBuf {
    let p = dir.join("quick.toml");
    std::fs::write(
        &p,
        format!(
            "window_radius = 2\nsquaring_steps = 5\n\n[[stages]]\ndownsample_levels = 1\nmax_iterations = {iterations}\nstep_size = 0.3\n\n[[stages]]\ndownsample_levels = 0\nmax_iterations = {}\nstep_size = 0.2\n",
            iterations / 2
        ),
    )
    .unwrap();
    p
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> f64 {
    let k = rows[0].iter().position(|c| c == name).unwrap();
    rows[1][k].parse().unwrap()
}

#[test]
fn synth_is_deterministic_and_centered() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(synth(a.path(), &["--seed", "4"]).status.success());
    assert!(synth(b.path(), &["--seed", "4"]).status.success());
    for i in 0..3 {
        for prefix in ["image", "mask", "labels", "velocity_true"] {
            let name = format!("{prefix}_{i:02}.nii.gz");
            assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap(), "{name}");
        }
    }
    let fields: Vec<VectorVolume> = (0..3)
        .map(|i| nifti::read_vector(a.path().join(format!("velocity_true_{i:02}.nii.gz"))).unwrap())
        .collect();
    assert!(fields[0].max_norm() > 0.5);
    for v in 0..fields[0].data().len() {
        for c in 0..3 {
            let sum: f64 = fields.iter().map(|f| f.data()[v][c]).sum();
            assert!(sum.abs() < 1e-12);
        }
    }
}

#[test]
fn synth_zero_amplitude_gives_identical_images() {
    let d = tempfile::tempdir().unwrap();
    let out = groupreg(&["synth", "--dims", "16", "--amplitude", "0", "--out", s(d.path())]);
    assert!(out.status.success(), "{}", stderr(&out));
    let first = std::fs::read(d.path().join("image_00.nii.gz")).unwrap();
    for i in 1..3 {
        assert_eq!(std::fs::read(d.path().join(format!("image_{i:02}.nii.gz"))).unwrap(), first);
    }
}

#[test]
fn synth_rejects_bad_parameters() {
    let d = tempfile::tempdir().unwrap();
    for extra in [vec!["--n", "1"], vec!["--amplitude", "-1"], vec!["--smoothness", "0"], vec!["--dims", "4"]] {
        let out = synth(d.path(), &extra);
        assert_eq!(out.status.code(), Some(1), "{extra:?}: {}", stderr(&out));
    }
    assert_eq!(groupreg(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(groupreg(&["--help"]).status.code(), Some(0));
}

#[test]
fn register_identical_images_stays_at_identity() {
    let d = tempfile::tempdir().unwrap();
    let img = Volume::from_fn(Grid::new([16, 16, 16], [1.0; 3]).unwrap(), |[x, y, z]| {
        50.0 + 30.0 * ((x as f64 * 0.5).sin() * (y as f64 * 0.4).cos() + (z as f64 * 0.3).sin())
    })
    .unwrap();
    let img_path = d.path().join("img.nii.gz");
    let mask_path = d.path().join("mask.nii.gz");
    nifti::write_scalar(&img_path, &img, Datatype::Float64).unwrap();
    nifti::write_mask(&mask_path, &Mask::full(img.grid().clone())).unwrap();
    let out_dir = d.path().join("out");
    let config = quick_config(d.path(), 6);
    let (i, m) = (s(&img_path), s(&mask_path));
    let out = groupreg(&[
        "register", "--config", s(&config), "--image", i, "--image", i, "--image", i, "--mask", m, "--mask", m, "--mask", m,
        "--out", s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for k in 0..3 {
        let u = nifti::read_vector(out_dir.join(format!("displacement_{k:02}.nii.gz"))).unwrap();
        assert!(u.max_norm() < 1e-3);
        assert_eq!(nifti::read_header(out_dir.join(format!("displacement_{k:02}.nii.gz"))).unwrap().intent_code, INTENT_DISPLACEMENT);
    }
    for name in ["mean_image.nii.gz", "common_mask.nii.gz", "warped_02.nii.gz", "velocity_01.nii.gz", "loss_trace.csv"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
}

#[test]
fn register_arity_mismatch_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = groupreg(&[
        "register", "--image", "a.nii", "--image", "b.nii", "--mask", "a.nii", "--mask", "b.nii", "--mask", "c.nii",
        "--out", s(d.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("arity"), "{}", stderr(&out));
}

#[test]
fn register_missing_input_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let out = groupreg(&["register", "--image", "/nope/a.nii", "--image", "/nope/b.nii", "--mask", "/nope/a.nii", "--mask", "/nope/b.nii", "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn register_empty_masks_is_a_numerical_failure() {
    let d = tempfile::tempdir().unwrap();
    let g = Grid::new([12, 12, 12], [1.0; 3]).unwrap();
    let img = Volume::from_fn(g.clone(), |[x, y, _]| (x * y) as f64).unwrap();
    let (i, m) = (d.path().join("i.nii"), d.path().join("m.nii"));
    nifti::write_scalar(&i, &img, Datatype::Float32).unwrap();
    nifti::write_mask(&m, &Mask::empty(g)).unwrap();
    let config = quick_config(d.path(), 2);
    let out = groupreg(&["register", "--config", s(&config), "--image", s(&i), "--image", s(&i), "--mask", s(&m), "--mask", s(&m), "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn register_progress_lines_match_the_loss_trace() {
    let d = tempfile::tempdir().unwrap();
    assert!(synth(d.path(), &["--seed", "2"]).status.success());
    let config = quick_config(d.path(), 6);
    let out_dir = d.path().join("reg");
    let img: Vec<String> = (0..3).map(|i| s(&d.path().join(format!("image_{i:02}.nii.gz"))).to_string()).collect();
    let msk: Vec<String> = (0..3).map(|i| s(&d.path().join(format!("mask_{i:02}.nii.gz"))).to_string()).collect();
    let mut args = vec!["register", "--config", s(&config), "--out", s(&out_dir)];
    for i in 0..3 {
        args.extend_from_slice(&["--image", &img[i], "--mask", &msk[i]]);
    }
    let out = groupreg(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let progress: Vec<(usize, usize, f64)> = stderr(&out)
        .lines()
        .filter_map(|l| l.strip_prefix("PROG "))
        .map(|l| {
            let f: Vec<&str> = l.split(' ').map(|kv| kv.split('=').nth(1).unwrap()).collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    let trace = read_csv(&out_dir.join("loss_trace.csv"));
    assert_eq!(trace[0], ["stage", "iteration", "loss", "best_loss"]);
    assert_eq!(progress.len(), trace.len() - 1);
    for (p, row) in progress.iter().zip(&trace[1..]) {
        assert_eq!(p.0, row[0].parse::<usize>().unwrap());
        assert_eq!(p.1, row[1].parse::<usize>().unwrap());
        assert_eq!(p.2, row[2].parse::<f64>().unwrap());
    }
    assert_eq!(progress.iter().filter(|p| p.0 == 0).count(), 7);
}

#[test]
fn register_output_does_not_depend_on_the_thread_count() {
    let d = tempfile::tempdir().unwrap();
    assert!(synth(d.path(), &["--seed", "6"]).status.success());
    let config = quick_config(d.path(), 6);
    let img: Vec<String> = (0..3).map(|i| s(&d.path().join(format!("image_{i:02}.nii.gz"))).to_string()).collect();
    let msk: Vec<String> = (0..3).map(|i| s(&d.path().join(format!("mask_{i:02}.nii.gz"))).to_string()).collect();
    let run = |threads: &str| {
        let out_dir = d.path().join(format!("reg_{threads}"));
        let mut args = vec!["--threads", threads, "register", "--config", s(&config), "--out", s(&out_dir)];
        for i in 0..3 {
            args.extend_from_slice(&["--image", &img[i], "--mask", &msk[i]]);
        }
        let out = groupreg(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        out_dir
    };
    let (one, three) = (run("1"), run("3"));
    for name in ["velocity_00.nii.gz", "displacement_02.nii.gz", "mean_image.nii.gz", "loss_trace.csv"] {
        assert_eq!(std::fs::read(one.join(name)).unwrap(), std::fs::read(three.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn metrics_identity_fields_and_identical_labels() {
    let d = tempfile::tempdir().unwrap();
    let g = Grid::new([10, 10, 10], [1.0; 3]).unwrap();
    let labels = Volume::from_fn(g.clone(), |[x, y, _]| [0, CLASS_CSF, CLASS_GM, CLASS_WM][(x + y) % 4] as f64).unwrap();
    let (f, l, m) = (d.path().join("u.nii.gz"), d.path().join("l.nii.gz"), d.path().join("m.nii.gz"));
    nifti::write_vector(&f, &VectorVolume::zeros(g.clone()), Datatype::Float64, INTENT_DISPLACEMENT).unwrap();
    nifti::write_scalar(&l, &labels, Datatype::Uint8).unwrap();
    nifti::write_mask(&m, &Mask::full(g)).unwrap();
    let csv = d.path().join("r.csv");
    let out = groupreg(&[
        "metrics", "--field", s(&f), "--field", s(&f), "--labels", s(&l), "--labels", s(&l), "--mask", s(&m), "--out", s(&csv),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_csv(&csv);
    assert_eq!(rows[0], MetricsReport::csv_header().split(',').collect::<Vec<_>>());
    for name in ["dice_csf", "dice_gm", "dice_wm"] {
        assert_eq!(column(&rows, name), 1.0);
    }
    assert_eq!(column(&rows, "centrality_mm"), 0.0);
    assert_eq!(column(&rows, "folding_percent"), 0.0);
}

#[test]
fn metrics_reports_folds_of_a_folded_field() {
    let d = tempfile::tempdir().unwrap();
    let g = Grid::new([12, 12, 12], [1.0; 3]).unwrap();
    // x maps to 6 - x inside a slab: orientation reversal
    let folded = VectorVolume::from_fn(g.clone(), |[x, _, _]| {
        let xf = x as f64;
        [if (3..9).contains(&x) { 12.0 - 2.0 * xf - (12.0 - 2.0 * 6.0) } else { 0.0 }, 0.0, 0.0]
    })
    .unwrap();
    let (f, z, m) = (d.path().join("f.nii.gz"), d.path().join("z.nii.gz"), d.path().join("m.nii.gz"));
    nifti::write_vector(&f, &folded, Datatype::Float64, INTENT_DISPLACEMENT).unwrap();
    nifti::write_vector(&z, &VectorVolume::zeros(g.clone()), Datatype::Float64, INTENT_DISPLACEMENT).unwrap();
    nifti::write_mask(&m, &Mask::full(g)).unwrap();
    let csv = d.path().join("r.csv");
    let out = groupreg(&["metrics", "--field", s(&f), "--field", s(&z), "--mask", s(&m), "--out", s(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(column(&read_csv(&csv), "folding_percent") > 0.0);
}

#[test]
fn metrics_grid_mismatch_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let (f, m) = (d.path().join("f.nii.gz"), d.path().join("m.nii.gz"));
    nifti::write_vector(&f, &VectorVolume::zeros(Grid::new([6, 6, 6], [1.0; 3]).unwrap()), Datatype::Float64, INTENT_DISPLACEMENT).unwrap();
    nifti::write_mask(&m, &Mask::full(Grid::new([6, 6, 7], [1.0; 3]).unwrap())).unwrap();
    let out = groupreg(&["metrics", "--field", s(&f), "--field", s(&f), "--mask", s(&m), "--out", s(&d.path().join("r.csv"))]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn metrics_on_register_outputs_match_in_process_evaluation() {
    let d = tempfile::tempdir().unwrap();
    assert!(synth(d.path(), &["--seed", "9", "--shift", "0.2"]).status.success());
    let config = quick_config(d.path(), 4);
    let reg = d.path().join("reg");
    let p = |prefix: &str, i: usize| s(&d.path().join(format!("{prefix}_{i:02}.nii.gz"))).to_string();
    let r = |prefix: &str, i: usize| s(&reg.join(format!("{prefix}_{i:02}.nii.gz"))).to_string();
    let (img, msk, lab): (Vec<_>, Vec<_>, Vec<_>) = (
        (0..3).map(|i| p("image", i)).collect(),
        (0..3).map(|i| p("mask", i)).collect(),
        (0..3).map(|i| p("labels", i)).collect(),
    );
    let mut args = vec!["register", "--config", s(&config), "--out", s(&reg)];
    for i in 0..3 {
        args.extend_from_slice(&["--image", &img[i], "--mask", &msk[i]]);
    }
    assert!(groupreg(&args).status.success());

    let (disp, vel): (Vec<_>, Vec<_>) = ((0..3).map(|i| r("displacement", i)).collect(), (0..3).map(|i| r("velocity", i)).collect());
    let csv = d.path().join("m.csv");
    let common = reg.join("common_mask.nii.gz");
    let mut args = vec!["metrics", "--mask", s(&common), "--out", s(&csv), "--group-id", "g"];
    for i in 0..3 {
        args.extend_from_slice(&["--field", &disp[i], "--velocity", &vel[i], "--labels", &lab[i], "--image", &img[i]]);
    }
    let out = groupreg(&args);
    assert!(out.status.success(), "{}", stderr(&out));

    let displacements: Vec<DisplacementField> = disp.iter().map(|f| DisplacementField::new(nifti::read_vector(f).unwrap())).collect();
    let velocities: Vec<VectorVolume> = vel.iter().map(|f| nifti::read_vector(f).unwrap()).collect();
    let members: Vec<Member> = (0..3)
        .map(|i| Member {
            image: nifti::read_scalar(&img[i]).unwrap(),
            mask: nifti::read_mask(&msk[i]).unwrap(),
            labels: Some(nifti::read_scalar(&lab[i]).unwrap()),
        })
        .collect();
    let group = Group::new(members).unwrap();
    let mask = groupreg::metrics::registered_common_mask(&group, &displacements).unwrap();
    assert_eq!(mask, nifti::read_mask(&common).unwrap());
    let images: Vec<Volume> = group.members().iter().map(|m| m.image.clone()).collect();
    let labels: Vec<Volume> = group.members().iter().map(|m| m.labels.clone().unwrap()).collect();
    let expected = evaluate_group(&EvaluationInput {
        group_id: "g".into(),
        displacements: &displacements,
        velocities: Some(&velocities),
        images: Some(&images),
        labels: Some(&labels),
        mask: &mask,
    })
    .unwrap();
    let rows = read_csv(&csv);
    let row: Vec<String> = expected.csv_row().split(',').map(str::to_string).collect();
    for (k, name) in rows[0].iter().enumerate().skip(1) {
        let (a, b): (f64, f64) = (rows[1][k].parse().unwrap(), row[k].parse().unwrap());
        assert!((a - b).abs() <= 1e-12, "{name}: {a} vs {b}");
    }
}

#[test]
fn warp_cases() {
    let d = tempfile::tempdir().unwrap();
    let args = ["synth", "--dims", "40", "--amplitude", "3", "--smoothness", "6", "--seed", "5", "--out", s(d.path())];
    assert!(groupreg(&args).status.success());
    let image = d.path().join("image_01.nii.gz");
    let labels = d.path().join("labels_01.nii.gz");
    let grid = nifti::read_scalar(&image).unwrap().grid().clone();

    let zero = d.path().join("zero.nii.gz");
    nifti::write_vector(&zero, &VectorVolume::zeros(grid.clone()), Datatype::Float64, INTENT_DISPLACEMENT).unwrap();
    let out = d.path().join("w.nii.gz");
    assert!(groupreg(&["warp", "--image", s(&image), "--field", s(&zero), "--out", s(&out)]).status.success());
    assert_eq!(nifti::read_scalar(&out).unwrap(), nifti::read_scalar(&image).unwrap());

    // ground-truth inverse: exp(-v_true) maps the member back onto the phantom
    let v = nifti::read_vector(d.path().join("velocity_true_01.nii.gz")).unwrap();
    let inverse = d.path().join("inv.nii.gz");
    nifti::write_vector(&inverse, exponentiate(&v.scaled(-1.0), 7).unwrap().field(), Datatype::Float64, INTENT_DISPLACEMENT).unwrap();
    assert!(groupreg(&["warp", "--image", s(&image), "--field", s(&inverse), "--out", s(&out)]).status.success());
    let recovered = nifti::read_scalar(&out).unwrap();
    let phantom = nifti::read_scalar(d.path().join("phantom_clean.nii.gz")).unwrap();
    let phantom_labels = nifti::read_scalar(d.path().join("phantom_labels.nii.gz")).unwrap();
    let (mut err, mut count) = (0.0, 0);
    for i in 0..grid.len() {
        if phantom_labels.data()[i] > 0.0 {
            err += (recovered.data()[i] - phantom.data()[i]).abs();
            count += 1;
        }
    }
    let mae = err / count as f64;
    assert!(mae < 1.0, "masked MAE {mae}");

    let out_labels = d.path().join("wl.nii.gz");
    assert!(groupreg(&["warp", "--labels", "--image", s(&labels), "--field", s(&inverse), "--out", s(&out_labels)]).status.success());
    let classes = |v: &Volume| {
        let mut c: Vec<u32> = v.data().iter().map(|&x| x as u32).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    assert_eq!(classes(&nifti::read_scalar(&out_labels).unwrap()), classes(&nifti::read_scalar(&labels).unwrap()));

    let small = d.path().join("small.nii.gz");
    nifti::write_vector(&small, &VectorVolume::zeros(Grid::new([8, 8, 8], [1.0; 3]).unwrap()), Datatype::Float64, INTENT_DISPLACEMENT).unwrap();
    assert_eq!(groupreg(&["warp", "--image", s(&image), "--field", s(&small), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn thread_env_must_be_numeric() {
    let out = Command::new(env!("CARGO_BIN_EXE_groupreg"))
        .args(["synth", "--dims", "8", "--out", "/tmp/unused"])
        .env("GROUPREG_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
