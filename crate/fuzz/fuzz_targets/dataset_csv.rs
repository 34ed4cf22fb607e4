#![no_main]

use libfuzzer_sys::fuzz_target;
use metaweight::datagen::parse_csv_dataset;

fuzz_target!(|data: &[u8]| {
    let Some((&flags, body)) = data.split_first() else {
        return;
    };
    let has_clean = flags & 1 == 1;
    let num_classes = (flags & 2 == 2).then_some(usize::from(flags >> 2));
    if let Ok(ds) = parse_csv_dataset(body, has_clean, num_classes) {
        ds.validate().expect("parser returned an invalid dataset");
    }
});
