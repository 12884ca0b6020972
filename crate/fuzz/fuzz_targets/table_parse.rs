#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenskill::report::{parse_ledger_csv, parse_matrix_csv, parse_metrics_csv, parse_sweep_csv, RunTables};

fuzz_target!(|data: &[u8]| {
    let matrix = parse_matrix_csv(data);
    let _ = parse_metrics_csv(data);
    let _ = parse_ledger_csv(data);
    let _ = parse_sweep_csv(data);
    if let Ok(matrix) = matrix {
        let tables = RunTables {
            matrix,
            metrics: Vec::new(),
            ledger: Vec::new(),
        };
        if tables.success_matrix().is_ok() {
            let _ = tokenskill::report::render_success_curve(&tables);
        }
    }
});
