#![no_main]

use libfuzzer_sys::fuzz_target;
use metaweight::eval_metrics::{read_metrics_csv, summarize_run, write_metrics_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(records) = read_metrics_csv(data) else {
        return;
    };
    let _ = summarize_run(&records);
    let mut out = Vec::new();
    write_metrics_csv(&mut out, &records).expect("parsed records serialize");
});
