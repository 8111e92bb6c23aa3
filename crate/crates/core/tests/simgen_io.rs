use mlpp::fpca::{trapezoid_weights, weighted_inner};
use mlpp::io::{read_dataset, read_time_grid, write_dataset};
use mlpp::simgen::{self, make_eigenfunctions, replicate_seed, SimDesign};
use mlpp::{Error, Group};

#[test]
fn eigenfunctions_are_orthonormal() {
    for t in [16, 100, 150] {
        let phi = make_eigenfunctions(t).unwrap();
        let w = trapezoid_weights(&simgen::time_grid(t));
        assert!((weighted_inner(&phi[0], &phi[0], &w) - 1.0).abs() < 1e-10);
        assert!((weighted_inner(&phi[1], &phi[1], &w) - 1.0).abs() < 1e-10);
        assert!(weighted_inner(&phi[0], &phi[1], &w).abs() < 1e-10);
    }
}

#[test]
fn truth_is_consistent_with_the_design() {
    let design = SimDesign::scaled(10, 8, 40);
    let (data, truth) = simgen::simulate(&design).unwrap();
    assert_eq!((data.n_subjects(), data.n_channels(), data.n_timepoints()), (10, 8, 40));
    assert_eq!(truth.subject_partitions.len(), 2);
    for (u, g) in data.groups().iter().enumerate() {
        assert_eq!(*g, design.group_of(u));
        let outlier = design.outlier_subjects.contains(&(u + 1));
        assert_eq!(truth.subject_partitions[0][u], g.code() as usize);
        let dim2 = truth.subject_partitions[1][u];
        if outlier {
            assert_eq!(dim2, 4 + u);
        } else {
            assert_eq!(dim2, g.code() as usize);
        }
    }
    assert_eq!(truth.recording_partitions.len(), design.outlier_subjects.len());
    for r in &truth.recording_partitions {
        assert_eq!(r.dim, 1);
        assert_eq!(r.labels.len(), 8);
        let mut distinct = r.labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
    }
    assert_eq!(truth.scores.len(), 10 * 8 * 2);
    assert_eq!(truth.signal.len(), data.values().len());
    let noise: Vec<f64> = data.values().iter().zip(&truth.signal).map(|(y, s)| y - s).collect();
    let var = noise.iter().map(|e| e * e).sum::<f64>() / noise.len() as f64;
    assert!((var / truth.noise_variance - 1.0).abs() < 0.1, "{var} vs {}", truth.noise_variance);
}

#[test]
fn noiseless_design_reproduces_the_signal() {
    let mut design = SimDesign::scaled(6, 4, 20);
    design.snr = f64::INFINITY;
    let (data, truth) = simgen::simulate(&design).unwrap();
    assert_eq!(truth.noise_variance, 0.0);
    assert_eq!(data.values(), &truth.signal[..]);
}

#[test]
fn seeds_control_the_output() {
    let design = SimDesign::scaled(6, 4, 20);
    let a = simgen::simulate(&design).unwrap();
    assert_eq!(a, simgen::simulate(&design).unwrap());
    let other = SimDesign { seed: 2, ..design };
    assert_ne!(a.0, simgen::simulate(&other).unwrap().0);
    assert_ne!(replicate_seed(1, 0), replicate_seed(1, 1));
    assert_ne!(replicate_seed(1, 1), replicate_seed(2, 1));
}

#[test]
fn invalid_designs_are_rejected() {
    let ok = SimDesign::scaled(6, 4, 20);
    for bad in [
        SimDesign { n_timepoints: 10, ..ok.clone() },
        SimDesign { n_group_a: 1, ..ok.clone() },
        SimDesign { snr: 0.0, ..ok.clone() },
        SimDesign { outlier_subjects: vec![7], ..ok.clone() },
        SimDesign { outlier_subjects: vec![1, 2, 3], ..ok.clone() },
    ] {
        assert!(matches!(simgen::simulate(&bad), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn csv_round_trip_keeps_values_ids_and_groups() {
    let (data, _) = simgen::simulate(&SimDesign::scaled(6, 3, 16)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (dp, gp) = (dir.path().join("d.csv"), dir.path().join("g.csv"));
    write_dataset(&dp, &gp, &data).unwrap();
    let back = read_dataset(&dp, &gp).unwrap();
    assert_eq!(back, data);
    assert_eq!(read_time_grid(&gp).unwrap(), data.time_grid());
}

#[test]
fn curves_may_arrive_in_any_order() {
    let dir = tempfile::tempdir().unwrap();
    let (dp, gp) = (dir.path().join("d.csv"), dir.path().join("g.csv"));
    std::fs::write(&gp, "time\n0\n1\n").unwrap();
    std::fs::write(
        &dp,
        "subject_id,channel_id,group_code,v1,v2\n\
         b,y,3,7,8\nb,x,3,5,6\na,x,2,1,2\na,y,2,3,4\n",
    )
    .unwrap();
    let data = read_dataset(&dp, &gp).unwrap();
    assert_eq!(data.groups(), &[Group::B, Group::A]);
    assert_eq!(data.subject_ids(), &["b".to_string(), "a".to_string()]);
    assert_eq!(data.values(), &[7.0, 8.0, 5.0, 6.0, 3.0, 4.0, 1.0, 2.0]);
}

#[test]
fn malformed_inputs_are_reported_as_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (dp, gp) = (dir.path().join("d.csv"), dir.path().join("g.csv"));
    std::fs::write(&gp, "time\n0\n1\n").unwrap();
    let header = "subject_id,channel_id,group_code,v1,v2\n";
    let cases = [
        // subject b lacks channel y
        "a,x,2,1,1\na,y,2,1,1\nb,x,3,2,2\n",
        "a,x,2,1,NA\nb,x,3,2,2\n",
        "a,x,5,1,1\nb,x,3,2,2\n",
        "a,x,2,1\nb,x,3,2,2\n",
        "a,x,2,1,1\na,x,2,1,1\nb,x,3,2,2\n",
        "a,x,2,1,1\na,y,3,1,1\nb,x,3,2,2\nb,y,3,2,2\n",
        "a,x,2,1,1\nb,x,2,2,2\n",
    ];
    for body in cases {
        std::fs::write(&dp, format!("{header}{body}")).unwrap();
        let err = read_dataset(&dp, &gp).unwrap_err();
        assert!(err.is_validation(), "{body}: {err}");
    }
    std::fs::write(&dp, format!("{header}a,x,2,1,1\nb,x,3,2,2\n")).unwrap();
    read_dataset(&dp, &gp).unwrap();
    std::fs::write(&gp, "time\n1\n0\n").unwrap();
    assert!(read_dataset(&dp, &gp).unwrap_err().is_validation());
    assert!(read_dataset(&dir.path().join("missing.csv"), &gp).unwrap_err().is_validation());
}
