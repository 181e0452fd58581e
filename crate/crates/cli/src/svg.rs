//! Static scatter plot of generated points over the mixture means.

use std::fmt::Write;

use selfcond_core::data::MixtureSpec;
use selfcond_core::Matrix;

const SIZE: f64 = 480.0;
const PAD: f64 = 20.0;

pub fn scatter(points: &Matrix, spec: &MixtureSpec, title: &str) -> String {
    // Frame the means with a margin; far-off samples are clipped to the border.
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in &spec.means {
        for &v in m {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let margin = 0.25 * (hi - lo).max(1.0);
    let (lo, hi) = (lo - margin, hi + margin);
    let scale = (SIZE - 2.0 * PAD) / (hi - lo);
    let px = |x: f64| PAD + (x.clamp(lo, hi) - lo) * scale;
    let py = |y: f64| SIZE - PAD - (y.clamp(lo, hi) - lo) * scale;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(s, r##"<g fill="#1f77b4" fill-opacity="0.5">"##);
    for row in points.iter_rows() {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#, px(row[0]), py(row[1]));
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r##"<g fill="none" stroke="#d62728" stroke-width="1.5">"##);
    for m in &spec.means {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="5"/>"#, px(m[0]), py(m[1]));
    }
    let _ = writeln!(s, "</g>\n</svg>");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
