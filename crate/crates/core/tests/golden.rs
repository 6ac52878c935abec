use std::fs;
use std::path::PathBuf;

use fairtier::metrics::{export_timeseries, ExportFormat};
use fairtier::{parse_scenario, run};

/// Set FAIRTIER_UPDATE_GOLDEN=1 to rewrite the expected export after an
/// intended behaviour change.
#[test]
fn phase_order_export_is_stable() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let sc = parse_scenario(&dir.join("phase_order.toml")).unwrap();
    let mut got = Vec::new();
    export_timeseries(&sc.run_header(), &run(&sc).snapshots, &mut got, ExportFormat::Csv).unwrap();
    let got = String::from_utf8(got).unwrap();

    let expected = dir.join("phase_order.csv");
    if std::env::var_os("FAIRTIER_UPDATE_GOLDEN").is_some() {
        fs::write(&expected, &got).unwrap();
    }
    let want = fs::read_to_string(&expected).expect("golden file present; regenerate with FAIRTIER_UPDATE_GOLDEN=1");
    assert!(got == want, "export drifted from tests/golden/phase_order.csv");
}
