#![no_main]

use libfuzzer_sys::fuzz_target;
use smoothlab::experiments::{emit_svg_lines, emit_svg_scatter, SvgStyle};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let grouped = SvgStyle::new("fuzz", "x", "y", Some("g"));
    let plain = SvgStyle::new("fuzz", "x", "y", None);
    for style in [&grouped, &plain] {
        if let Ok(svg) = emit_svg_scatter(text, style) {
            assert!(svg.ends_with("</svg>\n"));
        }
        let _ = emit_svg_lines(text, style);
    }
});
