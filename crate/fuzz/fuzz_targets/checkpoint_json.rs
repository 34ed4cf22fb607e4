#![no_main]

use libfuzzer_sys::fuzz_target;
use metaweight::checkpoint::{Checkpoint, ModelDescriptor};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(ckpt) = Checkpoint::from_json(text) else {
        return;
    };
    let _ = match ckpt.model {
        ModelDescriptor::Classifier { .. } => ckpt.into_classifier().map(|_| ()),
        ModelDescriptor::Mwnet { .. } => ckpt.into_mwnet().map(|_| ()),
    };
});
