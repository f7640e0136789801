use handeye::experiment::*;
use handeye::sim::{load_dataset, save_dataset, RobotModel};
use handeye::target::{save_mesh, synth_target, SyntheticTarget, TargetGeometry};
use handeye::{Error, Rotation, Vec3};

fn noise_free(rotations: usize) -> ExperimentConfig {
    let base = ExperimentConfig::default();
    ExperimentConfig {
        rotations,
        sensor: base.sensor.noise_free(),
        robot: RobotModel { position_jitter: 0.0 },
        ..base
    }
}

#[test]
fn config_json_round_trips() {
    let cfg = ExperimentConfig::default();
    let back: ExperimentConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 7, "rotations": 4}"#).unwrap();
    assert_eq!((partial.seed, partial.rotations), (7, 4));
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 7}"#).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ExperimentConfig {
            repetitions: 0,
            ..Default::default()
        },
        ExperimentConfig {
            rotations: 0,
            ..Default::default()
        },
        ExperimentConfig {
            model_density: -1.0,
            ..Default::default()
        },
        ExperimentConfig {
            target_file: Some("/nonexistent/target.off".into()),
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(Workcell::new(&cfg).is_err());
    }
}

#[test]
fn noise_free_run_is_exact() {
    let cfg = noise_free(3);
    let run = run_calibration(&cfg, 11).unwrap();
    assert!(run.error().amax() < 1e-2, "{:?}", run.error());
    assert_eq!(run.clouds.len(), 3);
    assert!(run.registrations.iter().all(|r| r.converged));
}

#[test]
fn explicit_trajectories_are_used() {
    let he = ExperimentConfig::default().hand_eye.rotation;
    let cell = Workcell::new(&noise_free(3)).unwrap();
    let trajectories = cell
        .trajectories
        .iter()
        .map(|t| TrajectorySpec {
            start: t.ee_positions[0],
            end: *t.ee_positions.last().unwrap(),
            steps: t.ee_positions.len() - 1,
            ee_rotation: t.ee_rotation,
        })
        .collect();
    let cfg = ExperimentConfig {
        trajectories,
        rotations: 0,
        ..noise_free(3)
    };
    assert_eq!(cfg.cloud_count(), 3);
    let run = Workcell::new(&cfg).unwrap().run(5, &he).unwrap();
    assert!(run.error().amax() < 1e-2);
}

#[test]
fn mesh_file_target() {
    let dir = tempfile::tempdir().unwrap();
    let TargetGeometry::Mesh(mesh) = synth_target(&SyntheticTarget::default()).unwrap() else {
        unreachable!()
    };
    let path = dir.path().join("block.off");
    save_mesh(&mesh, &path).unwrap();
    let cfg = ExperimentConfig {
        target_file: Some(path),
        ..noise_free(3)
    };
    let run = run_calibration(&cfg, 2).unwrap();
    assert!(run.error().amax() < 1e-2);
}

#[test]
fn stored_dataset_gives_the_same_estimate() {
    let cfg = noise_free(3);
    let cell = Workcell::new(&cfg).unwrap();
    let ds = cell.simulate(4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    let he = cfg.hand_eye.rotation;
    let a = cell.run_on(&ds, 4, &he).unwrap();
    let b = cell.run_on(&loaded, 4, &he).unwrap();
    assert!((a.estimate() - b.estimate()).amax() < 1e-3);
}

#[test]
fn two_clouds_are_refused_before_registration() {
    let err = run_calibration(&noise_free(2), 1).unwrap_err();
    assert!(err.is_rank_condition(), "{err}");
}

#[test]
fn count_sweep_argument_checks() {
    let cfg = noise_free(4);
    assert!(run_cloud_count_sweep(&cfg, &[2, 3]).unwrap_err().is_rank_condition());
    assert!(matches!(
        run_cloud_count_sweep(&cfg, &[3, 5]).unwrap_err(),
        Error::InvalidArgument(_)
    ));
    assert!(run_cloud_count_sweep(&cfg, &[]).is_err());
}

#[test]
fn count_sweep_rows() {
    let report = run_cloud_count_sweep(&noise_free(4), &[3, 4]).unwrap();
    assert_eq!(report.rows.len(), 2);
    for row in &report.rows {
        assert_eq!((row.succeeded, row.failed), (1, 0));
        assert!(row.mean_error.unwrap() < 1e-2);
    }
    let full = run_calibration(&noise_free(4), noise_free(4).repetition_seed(0)).unwrap();
    assert_eq!(report.row(4.0).unwrap().errors[0], Some(full.error()));
    let csv = report.to_csv();
    assert!(csv.starts_with("clouds,dx,dy,dz,mean_error,succeeded,failed\n3,"));
}

#[test]
fn zero_perturbation_matches_plain_run() {
    let cfg = noise_free(3);
    let report = run_rotation_perturbation_sweep(&cfg, &[0.0, 5.0], &handeye::geom::UnitAxis::z()).unwrap();
    let plain = run_calibration(&cfg, cfg.repetition_seed(0)).unwrap();
    let row = report.row(0.0).unwrap();
    assert!((row.errors[0].unwrap() - plain.error()).amax() < 1e-12);
    assert!(report.row(5.0).unwrap().mean_error.unwrap() > row.mean_error.unwrap());
}

#[test]
fn perturbed_rotation_biases_the_estimate() {
    let cfg = noise_free(3);
    let cell = Workcell::new(&cfg).unwrap();
    let wrong = cfg.hand_eye.rotation * Rotation::about_x(5f64.to_radians());
    let run = cell.run(3, &wrong).unwrap();
    assert!(run.error().amax() > 1e-2);
}

#[test]
fn calibration_table_layout() {
    let run = run_calibration(&noise_free(3), 1).unwrap();
    let runs = vec![Ok(run.clone()), Err(Error::RegistrationFailed("test".into())), Ok(run)];
    let csv = calibration_table(&runs);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "dataset,x,y,z,dx,dy,dz");
    assert!(lines[1].starts_with("1,907.5"));
    assert_eq!(lines[2], "2,failed,,,,,");
    assert!(lines[4].starts_with("mean,907.5"));
    assert_eq!(lines[5], "sd,0.000000,0.000000,0.000000,0.000000,0.000000,0.000000");
    assert_eq!(lines.len(), 6);
}

#[test]
fn outputs_are_written() {
    let runs = run_repetitions(&ExperimentConfig {
        repetitions: 2,
        ..noise_free(3)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_calibration_outputs(&runs, dir.path()).unwrap();
    for rep in ["rep_00", "rep_01"] {
        let d = dir.path().join(rep);
        assert!(d.join("result.json").is_file());
        assert!(d.join("clouds/cloud_02.ply").is_file());
        let reg: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("registration/cloud_00.json")).unwrap()).unwrap();
        assert!(reg["registered_origin"].is_array());
    }
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rep_00/result.json")).unwrap()).unwrap();
    let t = &result["hand_eye_translation"];
    let est = Vec3::new(t[0].as_f64().unwrap(), t[1].as_f64().unwrap(), t[2].as_f64().unwrap());
    assert!((est - Vec3::new(907.5, 97.0, 40.0)).amax() < 1e-2);
    assert!(dir.path().join("report.csv").is_file());
}

#[test]
fn flat_logo_target_is_localized_by_intensity() {
    let cfg = ExperimentConfig {
        target: SyntheticTarget::FlatLogo { size_px: 128, dpi: 50.8 },
        ..noise_free(4)
    };
    let cell = Workcell::new(&cfg).unwrap();
    assert!(cell.registration.binarize);
    let run = cell.run(cfg.repetition_seed(0), &cfg.hand_eye.rotation).unwrap();
    // Pixel pitch is 0.5 mm; intensity edges limit the localization.
    assert!(run.error().amax() < 1.0, "{:?}", run.error());
}
