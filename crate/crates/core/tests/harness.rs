use starris_rsma::harness::{
    emit, read_rows, run_experiment, write_rows, ExperimentSpec, Format, ResultRow, RisMode, Scheme,
};

fn spec(schemes: &[Scheme], modes: &[RisMode], trials: usize) -> ExperimentSpec {
    ExperimentSpec {
        schemes: schemes.to_vec(),
        modes: modes.to_vec(),
        trials,
        ..ExperimentSpec::default()
    }
}

fn csv(rows: &[ResultRow]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_rows(rows, Format::Csv, &mut buf).unwrap();
    buf
}

fn within_ninth_digit(a: f64, b: f64) -> bool {
    if a.is_nan() || b.is_nan() {
        return a.is_nan() && b.is_nan();
    }
    if a == 0.0 {
        return b == 0.0;
    }
    let ulp9 = 10f64.powi(a.abs().log10().floor() as i32 - 8);
    (a - b).abs() <= 0.5 * ulp9 * (1.0 + 1e-9)
}

#[test]
fn repeated_runs_are_byte_identical() {
    let mut s = spec(&[Scheme::Rsma], &[RisMode::Star], 2);
    let first = csv(&run_experiment(&s).unwrap());
    assert_eq!(first, csv(&run_experiment(&s).unwrap()));
    s.workers = Some(1);
    let serial = csv(&run_experiment(&s).unwrap());
    s.workers = Some(2);
    assert_eq!(serial, csv(&run_experiment(&s).unwrap()));
    assert_eq!(first, serial);
}

#[test]
fn no_surface_is_independent_of_element_count() {
    let mut s = spec(&[Scheme::Tin], &[RisMode::None], 2);
    s.base.ris_elements = 8;
    let small = run_experiment(&s).unwrap();
    s.base.ris_elements = 16;
    let large = run_experiment(&s).unwrap();
    for (a, b) in small.iter().zip(&large) {
        assert!((a.min_ee_nats - b.min_ee_nats).abs() <= 1e-12 * a.min_ee_nats.abs().max(1.0));
    }
}

#[test]
fn nats_and_bits_agree() {
    let rows = run_experiment(&spec(&[Scheme::Tin], &[RisMode::Random], 1)).unwrap();
    for r in &rows {
        let bits = r.min_ee_nats / std::f64::consts::LN_2;
        assert!((r.min_ee_bits - bits).abs() <= 1e-12 * bits.abs().max(1.0));
    }
}

#[test]
fn csv_and_json_round_trip() {
    let rows = run_experiment(&spec(&[Scheme::Tin, Scheme::Rsma], &[RisMode::Star], 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for format in [Format::Csv, Format::Json] {
        let path = dir.path().join(format!("rows.{format}"));
        emit(&rows, &path, format).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = read_rows(&mut bytes.as_slice(), format).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(
                (a.trial, a.scheme, a.ris_mode, a.iters),
                (b.trial, b.scheme, b.ris_mode, b.iters)
            );
            assert_eq!(a.status, b.status);
            assert!(within_ninth_digit(a.min_ee_nats, b.min_ee_nats));
            for (x, y) in a.r.iter().chain(&a.e).zip(b.r.iter().chain(&b.e)) {
                assert!(within_ninth_digit(*x, *y), "{x} vs {y}");
            }
        }
        let mut again = Vec::new();
        write_rows(&back, format, &mut again).unwrap();
        assert_eq!(again, bytes);
    }
}

#[test]
fn optimized_surface_beats_random_with_warm_start() {
    let mut s = spec(&[Scheme::Tin], &[RisMode::Random, RisMode::Star], 3);
    s.warm_start = true;
    let rows = run_experiment(&s).unwrap();
    for t in 0..3 {
        let get = |m: RisMode| {
            rows.iter()
                .find(|r| r.trial == t && r.ris_mode == m)
                .unwrap()
                .min_ee_nats
        };
        assert!(
            get(RisMode::Star) >= get(RisMode::Random) - 1e-9,
            "trial {t}"
        );
    }
}

#[test]
fn header_lists_per_user_columns() {
    let rows = run_experiment(&spec(&[Scheme::Tin], &[RisMode::None], 1)).unwrap();
    let text = String::from_utf8(csv(&rows)).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "sweep_var,sweep_value,trial,scheme,ris_mode,min_ee_nats,min_ee_bits,iters,status,wall_ms,r_1,r_2,r_3,r_4,e_1,e_2,e_3,e_4"
    );
}
