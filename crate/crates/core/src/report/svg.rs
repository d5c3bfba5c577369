//! Plain SVG charts rendered from the comparison tables.

use std::fmt::Write;

use crate::ics::IcsDeltaRow;

use super::{EntropyDeltaRow, IatComparisonRow};

const WIDTH: f64 = 800.0;
const MARGIN: f64 = 60.0;
const BASE_COLOR: &str = "#4477aa";
const TEST_COLOR: &str = "#cc6677";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn open(height: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn legend(s: &mut String, base_label: &str, test_label: &str) {
    let x = WIDTH - MARGIN - 140.0;
    for (i, (label, color)) in [(base_label, BASE_COLOR), (test_label, TEST_COLOR)]
        .iter()
        .enumerate()
    {
        let y = 34.0 + i as f64 * 14.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#,
            y - 9.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}">{}</text>"#,
            x + 14.0,
            escape(label)
        );
    }
}

/// Per-port packet counts for two years joined by a line, log-scaled.
pub fn ics_dumbbell(rows: &[IcsDeltaRow], base_label: &str, test_label: &str) -> String {
    let row_h = 22.0;
    let height = 80.0 + row_h * rows.len() as f64;
    let mut s = open(height, "ICS port targeting");
    legend(&mut s, base_label, test_label);
    let left = MARGIN + 120.0;
    let right = WIDTH - MARGIN;
    let max = rows
        .iter()
        .map(|r| r.baseline_count.max(r.test_count))
        .max()
        .unwrap_or(1)
        .max(1);
    let scale =
        |v: u64| left + (right - left) * ((v as f64 + 1.0).log10() / (max as f64 + 1.0).log10());
    for (i, r) in rows.iter().enumerate() {
        let y = 70.0 + row_h * i as f64;
        let (xb, xt) = (scale(r.baseline_count), scale(r.test_count));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{} {}/{}</text>"#,
            left - 8.0,
            y + 4.0,
            escape(&r.name),
            r.port,
            r.transport
        );
        let _ = writeln!(
            s,
            r##"<line x1="{xb:.2}" y1="{y}" x2="{xt:.2}" y2="{y}" stroke="#999" stroke-width="2"/>"##
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{xb:.2}" cy="{y}" r="5" fill="{BASE_COLOR}"/>"#
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{xt:.2}" cy="{y}" r="5" fill="{TEST_COLOR}"/>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Side-by-side IAT fractions per bin with the 1-100 ms window shaded.
pub fn iat_histogram(rows: &[IatComparisonRow], base_label: &str, test_label: &str) -> String {
    let height = 360.0;
    let mut s = open(height, "Inter-arrival time distribution");
    legend(&mut s, base_label, test_label);
    let (top, bottom) = (60.0, height - 50.0);
    let n = rows.len().max(1) as f64;
    let slot = (WIDTH - 2.0 * MARGIN) / n;
    let max = rows
        .iter()
        .flat_map(|r| [r.baseline_fraction, r.test_fraction])
        .fold(0.0f64, f64::max)
        .max(1e-12);

    let window: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            r.bin
                .parse::<usize>()
                .is_ok_and(|j| crate::iat::PACING_WINDOW.contains(&j))
        })
        .map(|(i, _)| i)
        .collect();
    if let (Some(&a), Some(&b)) = (window.first(), window.last()) {
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{top}" width="{:.2}" height="{}" fill="#eeeeaa"/>"##,
            MARGIN + slot * a as f64,
            slot * (b - a + 1) as f64,
            bottom - top
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let x = MARGIN + slot * i as f64;
        for (k, (v, color)) in [
            (r.baseline_fraction, BASE_COLOR),
            (r.test_fraction, TEST_COLOR),
        ]
        .iter()
        .enumerate()
        {
            let h = (bottom - top) * v / max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{color}"><title>{}: {v}</title></rect>"#,
                x + slot * 0.5 * k as f64,
                bottom - h,
                slot * 0.5,
                escape(&r.bin_label)
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="#333"/>"##,
        WIDTH - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">IAT (ms, log bins)</text>"#,
        WIDTH / 2.0,
        bottom + 30.0
    );
    s.push_str("</svg>\n");
    s
}

/// Test-year per-second rates against the standard and tuned thresholds.
pub fn threshold_band(
    test_counts: &[u64],
    baseline_mu: f64,
    standard_threshold: f64,
    tuned_threshold: f64,
    test_label: &str,
) -> String {
    let height = 360.0;
    let mut s = open(height, "Volumetric thresholds");
    let (top, bottom) = (50.0, height - 40.0);
    let max = test_counts
        .iter()
        .map(|&c| c as f64)
        .chain([standard_threshold, tuned_threshold, baseline_mu])
        .fold(1.0f64, f64::max)
        * 1.05;
    let y = |v: f64| bottom - (bottom - top) * (v / max);
    let n = test_counts.len().max(2);
    let x = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (n - 1) as f64;

    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{:.2}" width="{}" height="{:.2}" fill="#f3e0e0"/>"##,
        y(standard_threshold),
        WIDTH - 2.0 * MARGIN,
        (y(tuned_threshold) - y(standard_threshold)).max(0.0)
    );
    let mut path = String::new();
    for (i, &c) in test_counts.iter().enumerate() {
        let _ = write!(
            path,
            "{}{:.2},{:.2} ",
            if i == 0 { "M" } else { "L" },
            x(i),
            y(c as f64)
        );
    }
    let _ = writeln!(
        s,
        r#"<path d="{}" fill="none" stroke="{TEST_COLOR}" stroke-width="1"/>"#,
        path.trim_end()
    );
    for (v, label, dash) in [
        (standard_threshold, "mean + 3 sigma", "6,3"),
        (tuned_threshold, "tuned", "2,2"),
        (baseline_mu, "baseline mean", "1,0"),
    ] {
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="#333" stroke-dasharray="{dash}"/>"##,
            y(v),
            WIDTH - MARGIN,
            y(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}">{label} ({v:.1})</text>"#,
            WIDTH - MARGIN + 2.0 - 120.0,
            y(v) - 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{} packets per second</text>"#,
        WIDTH / 2.0,
        bottom + 25.0,
        escape(test_label)
    );
    s.push_str("</svg>\n");
    s
}

/// Entropy in bits per dimension for both years.
pub fn entropy_bars(rows: &[EntropyDeltaRow], base_label: &str, test_label: &str) -> String {
    let height = 300.0;
    let mut s = open(height, "Shannon entropy");
    legend(&mut s, base_label, test_label);
    let (top, bottom) = (60.0, height - 40.0);
    let max = rows
        .iter()
        .flat_map(|r| [r.baseline_bits, r.test_bits])
        .fold(1.0f64, f64::max);
    let group = (WIDTH - 2.0 * MARGIN) / rows.len().max(1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let x0 = MARGIN + group * i as f64 + group * 0.2;
        let bar = group * 0.3;
        for (k, (v, color)) in [(r.baseline_bits, BASE_COLOR), (r.test_bits, TEST_COLOR)]
            .iter()
            .enumerate()
        {
            let h = (bottom - top) * v / max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{bar:.2}" height="{h:.2}" fill="{color}"/>"#,
                x0 + bar * k as f64,
                bottom - h
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.2}</text>"#,
                x0 + bar * (k as f64 + 0.5),
                bottom - h - 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + bar,
            bottom + 16.0,
            escape(&r.dimension)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let rows = vec![EntropyDeltaRow {
            dimension: "src_ip".into(),
            baseline_bits: 12.0,
            test_bits: 16.0,
            delta_bits: 4.0,
            direction: "increased".into(),
            baseline_normalized: 0.9,
            test_normalized: 0.95,
        }];
        let svg = entropy_bars(&rows, "2021", "2025 <a&b>");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("2025 &lt;a&amp;b&gt;"));

        let band = threshold_band(&[40, 45, 50], 45.0, 72.0, 41.0, "2025");
        assert_eq!(band.matches("<line").count(), 3);
    }
}
