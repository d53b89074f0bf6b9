use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::model::ModelConfig;
use crate::neuron::{Family, NeuronMask};

/// `<root>/<model-hash>/<dataset>/<mask-id>.<ext>`.
pub fn report_path(root: &Path, model_hash: &str, dataset: &str, mask_id: &str, ext: &str) -> PathBuf {
    root.join(model_hash).join(dataset).join(format!("{mask_id}.{ext}"))
}

/// Member counts per layer and family.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Distribution {
    /// `counts[layer][family]` in `Family::ALL` order.
    pub counts: Vec<[usize; 4]>,
}

impl Distribution {
    pub fn new(set: &NeuronMask, cfg: &ModelConfig) -> Self {
        let mut counts = vec![[0usize; 4]; cfg.num_layers];
        for n in set.iter() {
            let f = Family::ALL.iter().position(|&f| f == n.family).expect("known family");
            counts[n.layer][f] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,family,count\n");
        for (layer, row) in self.counts.iter().enumerate() {
            for (f, c) in Family::ALL.iter().zip(row) {
                let _ = writeln!(out, "{layer},{f},{c}");
            }
        }
        out
    }

    /// Grouped bar chart, one group per layer and one bar per family.
    pub fn to_svg(&self) -> String {
        const COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];
        let (bar, gap, height, pad) = (14.0, 18.0, 160.0, 30.0);
        let groups = self.counts.len().max(1) as f64;
        let width = pad * 2.0 + groups * (4.0 * bar + gap);
        let max = self.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="10">"#,
            height + pad * 2.0 + 20.0
        );
        let base = pad + height;
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
            width - pad
        );
        for (layer, row) in self.counts.iter().enumerate() {
            let x0 = pad + layer as f64 * (4.0 * bar + gap) + gap / 2.0;
            for (f, &c) in row.iter().enumerate() {
                let h = c as f64 / max * height;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{bar}" height="{h}" fill="{}"><title>layer {layer} {} {c}</title></rect>"#,
                    x0 + f as f64 * bar,
                    base - h,
                    COLORS[f],
                    Family::ALL[f]
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">L{layer}</text>"#,
                x0 + 2.0 * bar,
                base + 14.0
            );
        }
        for (f, fam) in Family::ALL.iter().enumerate() {
            let x = pad + f as f64 * 70.0;
            let y = base + 30.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{}" width="8" height="8" fill="{}"/><text x="{}" y="{y}">{fam}</text>"#,
                y - 8.0,
                COLORS[f],
                x + 11.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::NeuronId;

    #[test]
    fn empty_and_single_sets() {
        let cfg = ModelConfig::desk(20, 8);
        let d = Distribution::new(&NeuronMask::empty(), &cfg);
        assert_eq!(d.total(), 0);
        let svg = d.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

        let one = NeuronMask::new(&cfg, [NeuronId::new(2, Family::AttnK, 5)]).unwrap();
        let d = Distribution::new(&one, &cfg);
        assert_eq!(d.counts[2], [0, 0, 1, 0]);
        assert_eq!(d.total(), 1);
        assert_eq!(d.to_csv().lines().count(), 1 + 4 * 4);
    }

    #[test]
    fn paths_follow_the_naming_scheme() {
        let p = report_path(Path::new("/r"), "abc", "mcq-test", "general", "csv");
        assert_eq!(p, PathBuf::from("/r/abc/mcq-test/general.csv"));
    }
}
