//! The full set of evaluation and selection datasets rendered from one world.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{read_jsonl, split_by_category, write_jsonl, DatasetFile, DatasetHeader, Instance, Split};
use super::render::{render_crc, render_ctrl, render_filler, render_mcq, render_target_task, FillerRule, MAX_VARIANTS};
use super::WorldSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSizes {
    /// Rendered variants per fact, at most [`MAX_VARIANTS`].
    pub variants: u64,
    /// Reading-comprehension items per culture, split evenly between neur and test.
    pub crc_per_culture: u64,
    /// Filler-task items (split evenly).
    pub filler: u64,
    /// Target-task items for fine-tuning and for its held-out evaluation.
    pub target_train: u64,
    pub target_test: u64,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            variants: MAX_VARIANTS,
            crc_per_culture: 50,
            filler: 400,
            target_train: 2400,
            target_test: 400,
        }
    }
}

/// Every dataset the pipeline consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub mcq_neur: DatasetFile,
    pub mcq_test: DatasetFile,
    pub ctrl: DatasetFile,
    pub crc_neur: DatasetFile,
    pub crc_test: DatasetFile,
    pub filler: DatasetFile,
    pub target_train: DatasetFile,
    pub target_test: DatasetFile,
}

/// File stem of each suite member.
pub const SUITE_NAMES: [&str; 8] = [
    "mcq-neur",
    "mcq-test",
    "ctrl",
    "crc-neur",
    "crc-test",
    "filler",
    "target-train",
    "target-test",
];

fn header(world: &WorldSpec, name: &str, sizes: &SuiteSizes) -> DatasetHeader {
    DatasetHeader {
        name: name.to_string(),
        world_seed: world.seed,
        generator: concat!("cultlab ", env!("CARGO_PKG_VERSION")).to_string(),
        params: format!(
            "variants={} crc_per_culture={} filler={} target_train={} target_test={}",
            sizes.variants, sizes.crc_per_culture, sizes.filler, sizes.target_train, sizes.target_test
        ),
    }
}

pub fn build_suite(world: &WorldSpec, sizes: &SuiteSizes) -> Result<Suite> {
    if sizes.variants == 0 || sizes.variants > MAX_VARIANTS {
        return Err(Error::Config(format!(
            "variants per fact must be in 1..={MAX_VARIANTS}, got {}",
            sizes.variants
        )));
    }
    let mut mcq = Vec::new();
    for f in world.facts() {
        for v in 0..sizes.variants {
            mcq.push(render_mcq(world, f.culture, f.category, f.slot, v)?);
        }
    }
    let (neur, test) = split_by_category(world, &mcq)?;
    let ctrl = neur.iter().map(|i| render_ctrl(world, i)).collect::<Result<Vec<_>>>()?;
    let mut crc_neur = Vec::new();
    let mut crc_test = Vec::new();
    for c in 0..world.cultures.len() {
        for v in 0..sizes.crc_per_culture {
            let inst = render_crc(world, c, v)?;
            match inst.split {
                Split::Neur => crc_neur.push(inst),
                Split::Test => crc_test.push(inst),
            }
        }
    }
    let filler: Vec<Instance> = (0..sizes.filler)
        .map(|v| render_filler(world, FillerRule::Majority, v))
        .collect();
    let target_train: Vec<Instance> = (0..sizes.target_train).map(|v| render_target_task(world, v)).collect();
    let target_test: Vec<Instance> = (0..sizes.target_test)
        .map(|v| render_target_task(world, sizes.target_train + v))
        .collect();
    let mk = |name: &str, v: Vec<Instance>| DatasetFile::new(header(world, name, sizes), v);
    Ok(Suite {
        mcq_neur: mk("mcq-neur", neur)?,
        mcq_test: mk("mcq-test", test)?,
        ctrl: mk("ctrl", ctrl)?,
        crc_neur: mk("crc-neur", crc_neur)?,
        crc_test: mk("crc-test", crc_test)?,
        filler: mk("filler", filler)?,
        target_train: mk("target-train", target_train)?,
        target_test: mk("target-test", target_test)?,
    })
}

impl Suite {
    pub fn members(&self) -> [&DatasetFile; 8] {
        [
            &self.mcq_neur,
            &self.mcq_test,
            &self.ctrl,
            &self.crc_neur,
            &self.crc_test,
            &self.filler,
            &self.target_train,
            &self.target_test,
        ]
    }

    /// Writes `<name>.jsonl` for every member.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for d in self.members() {
            write_jsonl(d, &dir.join(format!("{}.jsonl", d.header.name)))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let r = |name: &str| read_jsonl(&dir.join(format!("{name}.jsonl")));
        Ok(Self {
            mcq_neur: r("mcq-neur")?,
            mcq_test: r("mcq-test")?,
            ctrl: r("ctrl")?,
            crc_neur: r("crc-neur")?,
            crc_test: r("crc-test")?,
            filler: r("filler")?,
            target_train: r("target-train")?,
            target_test: r("target-test")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldSizes};

    #[test]
    fn default_suite_counts() {
        let w = generate_world(1, &WorldSizes::default()).unwrap();
        let s = build_suite(&w, &SuiteSizes::default()).unwrap();
        // 8 cultures × 3 categories × 12 slots × 5 variants per split.
        assert_eq!(s.mcq_neur.len(), 1440);
        assert_eq!(s.mcq_test.len(), 1440);
        assert_eq!(s.ctrl.len(), 1440);
        assert_eq!(s.crc_neur.len(), 200);
        assert_eq!(s.crc_test.len(), 200);
        assert_eq!(SUITE_NAMES.to_vec(), s.members().iter().map(|d| d.header.name.as_str()).collect::<Vec<_>>());
        for c in &w.cultures {
            assert_eq!(s.crc_neur.for_culture(c).len(), 25);
        }
    }

    #[test]
    fn rejects_too_many_variants() {
        let w = generate_world(1, &WorldSizes::default()).unwrap();
        let sizes = SuiteSizes {
            variants: 6,
            ..SuiteSizes::default()
        };
        assert!(build_suite(&w, &sizes).is_err());
    }
}
