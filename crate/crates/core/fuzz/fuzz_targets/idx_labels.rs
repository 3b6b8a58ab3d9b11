#![no_main]

use libfuzzer_sys::fuzz_target;
use smoothlab::dataset::{dataset_from_idx, parse_idx_images, parse_idx_labels};

// The first byte splits the input into an image file and a label file.
fuzz_target!(|data: &[u8]| {
    let _ = parse_idx_labels(data);
    if let Some((&cut, rest)) = data.split_first() {
        let cut = (cut as usize * rest.len()) / 255;
        let (img, lab) = rest.split_at(cut);
        if let (Ok(img), Ok(lab)) = (parse_idx_images(img), parse_idx_labels(lab)) {
            let _ = dataset_from_idx(img, lab, "fuzz");
        }
    }
});
