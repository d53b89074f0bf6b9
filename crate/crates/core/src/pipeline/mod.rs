//! Stage wiring from world generation to the final report. Every stage writes
//! into its own directory under the output root together with a `stage.json`
//! manifest that records the tool version, the config hash and the SHA-256 of
//! every file it read or wrote.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{aggregate, aggregate_culture, taylor_report, ScoreTable};
use crate::error::{Error, Result};
use crate::eval::{
    bootstrap_pvalue, composition, cross_culture_matrix, eval_accuracy, random_mask_baseline, Distribution,
};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::neuron::NeuronMask;
use crate::selection::{rank_modules_by_neuron_count, select_general, select_specific, CultureScores, NeuronSet};
use crate::training::{finetune_selective, pretrain, select_modules, BudgetStrategy, TrainLog};
use crate::world::{build_suite, derive_seed, generate_world, read_jsonl, write_jsonl, DatasetFile, WorldSpec};

pub use config::{AblationSection, FinetuneSection, ModelShape, PretrainSection, RunConfig, ScoreSection};

pub const TOOL: &str = concat!("cultlab ", env!("CARGO_PKG_VERSION"));
const MANIFEST: &str = "stage.json";
/// Datasets scored for selection.
const SCORED: [&str; 3] = ["mcq-neur", "ctrl", "crc-neur"];
/// Datasets evaluated under the culture-general mask.
const ABLATED: [&str; 4] = ["mcq-neur", "mcq-test", "crc-test", "filler"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Train,
    Score,
    Select,
    Ablate,
    Finetune,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Train,
        Stage::Score,
        Stage::Select,
        Stage::Ablate,
        Stage::Finetune,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::Ablate => "ablate",
            Stage::Finetune => "finetune",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::Train => &[Stage::Generate],
            Stage::Score => &[Stage::Generate, Stage::Train],
            Stage::Select => &[Stage::Generate, Stage::Train, Stage::Score],
            Stage::Ablate | Stage::Finetune => &[Stage::Generate, Stage::Train, Stage::Select],
            Stage::Report => &[
                Stage::Generate,
                Stage::Train,
                Stage::Score,
                Stage::Select,
                Stage::Ablate,
                Stage::Finetune,
            ],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Contents of a stage's `stage.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub tool: String,
    pub config_hash: String,
    pub model_hash: Option<String>,
    /// Root-relative path to SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn read(root: &Path, stage: Stage) -> Result<Self> {
        let path = root.join(stage.as_str()).join(MANIFEST);
        if !path.exists() {
            return Err(Error::Provenance(format!("stage '{stage}' has not been run under {}", root.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One in-progress stage: checks upstream manifests and records file hashes.
struct StageRun<'p> {
    pipeline: &'p Pipeline,
    stage: Stage,
    upstream: BTreeMap<String, String>,
    manifest: StageManifest,
}

impl<'p> StageRun<'p> {
    fn begin(pipeline: &'p Pipeline, stage: Stage) -> Result<Self> {
        let dir = pipeline.stage_dir(stage);
        if dir.join(MANIFEST).exists() && !pipeline.force {
            return Err(Error::Config(format!(
                "{} already holds '{stage}' outputs; pass --force to overwrite",
                dir.display()
            )));
        }
        let hash = pipeline.config.hash();
        let mut upstream = BTreeMap::new();
        for &up in stage.upstream() {
            let m = StageManifest::read(&pipeline.out, up)?;
            if m.config_hash != hash {
                return Err(Error::Provenance(format!(
                    "stage '{up}' was produced with config {}, current config is {hash}",
                    m.config_hash
                )));
            }
            upstream.extend(m.outputs);
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            pipeline,
            stage,
            upstream,
            manifest: StageManifest {
                stage: stage.as_str().into(),
                tool: TOOL.into(),
                config_hash: hash,
                model_hash: None,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        })
    }

    /// Checks an upstream file against its recorded hash and returns its path.
    fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.pipeline.out.join(rel);
        let recorded = self
            .upstream
            .get(rel)
            .ok_or_else(|| Error::Provenance(format!("{rel} is not an output of any upstream stage")))?;
        let actual = sha256_file(&path)?;
        if &actual != recorded {
            return Err(Error::Provenance(format!("{rel} has hash {actual}, upstream recorded {recorded}")));
        }
        self.manifest.inputs.insert(rel.to_string(), actual);
        Ok(path)
    }

    fn dataset(&mut self, name: &str) -> Result<DatasetFile> {
        read_jsonl(&self.input(&format!("generate/{name}.jsonl"))?)
    }

    fn world(&mut self) -> Result<WorldSpec> {
        WorldSpec::load(&self.input("generate/world.json")?)
    }

    fn model(&mut self) -> Result<Model> {
        self.input("train/model/manifest.json")?;
        let weights = self.input("train/model/weights.bin")?;
        let model = load_checkpoint(weights.parent().expect("checkpoint dir"))?;
        self.manifest.model_hash = Some(model.hash());
        Ok(model)
    }

    fn set(&mut self, name: &str) -> Result<NeuronSet> {
        let set = NeuronSet::read(&self.input(&format!("select/{name}.set"))?)?;
        self.check_model_hash(&set.provenance.model_hash)?;
        Ok(set)
    }

    fn check_model_hash(&self, found: &str) -> Result<()> {
        match &self.manifest.model_hash {
            Some(h) if h != found => Err(Error::Provenance(format!(
                "artifact was computed for model {found}, loaded model is {h}"
            ))),
            _ => Ok(()),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.pipeline.stage_dir(self.stage).join(rel)
    }

    /// Hashes a file already written under this stage's directory.
    fn record(&mut self, rel: &str) -> Result<()> {
        let sha = sha256_file(&self.path(rel))?;
        self.manifest.outputs.insert(format!("{}/{rel}", self.stage), sha);
        Ok(())
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.record(rel)
    }

    fn finish(mut self) -> Result<StageManifest> {
        let config = self.pipeline.config.to_toml();
        self.write("config.toml", &config)?;
        let path = self.path(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

/// Key/value summary rows written as `key,value` CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub rows: BTreeMap<String, f64>,
}

impl Summary {
    fn put(&mut self, key: impl Into<String>, value: f64) {
        self.rows.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Result<f64> {
        self.rows
            .get(key)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("summary has no '{key}'")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in &self.rows {
            let _ = writeln!(out, "{k},{v:.6}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let (k, v) = line
                .split_once(',')
                .ok_or_else(|| parse_err(format!("expected key,value in '{line}'")))?;
            let v: f64 = v.parse().map_err(|e| parse_err(format!("value '{v}': {e}")))?;
            rows.insert(k.to_string(), v);
        }
        Ok(Self { rows })
    }
}

/// A configured run rooted at one output directory.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    /// Replace existing stage outputs instead of refusing.
    pub force: bool,
    /// Trained models are reused from `<cache>/models/<model key>` when present.
    pub cache: Option<PathBuf>,
}

impl Pipeline {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
            force: false,
            cache: None,
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.as_str())
    }

    pub fn run(&self, stage: Stage) -> Result<StageManifest> {
        match stage {
            Stage::Generate => self.generate(),
            Stage::Train => self.train(),
            Stage::Score => self.score(),
            Stage::Select => self.select(),
            Stage::Ablate => self.ablate(),
            Stage::Finetune => self.finetune(),
            Stage::Report => self.report(),
        }
    }

    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            self.run(stage)?;
        }
        Ok(())
    }

    /// World file and every suite dataset.
    pub fn generate(&self) -> Result<StageManifest> {
        let mut run = StageRun::begin(self, Stage::Generate)?;
        let world = generate_world(self.config.seed, &self.config.world)?;
        let suite = build_suite(&world, &self.config.suite)?;
        world.save(&run.path("world.json"))?;
        run.record("world.json")?;
        for d in suite.members() {
            let rel = format!("{}.jsonl", d.header.name);
            write_jsonl(d, &run.path(&rel))?;
            run.record(&rel)?;
        }
        run.finish()
    }

    fn cached_model(&self, world: &WorldSpec) -> Result<(Model, TrainLog)> {
        let cfg = &self.config;
        let model_cfg = cfg.model.with_vocab(world.vocab.len());
        let train = || pretrain(world, model_cfg.clone(), &cfg.train_config(), &cfg.pretrain.mix);
        let Some(cache) = &self.cache else {
            return train();
        };
        let dir = cache.join("models").join(cfg.model_key());
        let log_path = dir.join("train-log.json");
        if log_path.exists() {
            let model = load_checkpoint(&dir)?;
            if model.config() != &model_cfg {
                return Err(Error::Corruption(format!("cached model in {} has another shape", dir.display())));
            }
            let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let log = serde_json::from_str(&text).map_err(|e| Error::Corruption(format!("cached log: {e}")))?;
            return Ok((model, log));
        }
        let (model, log) = train()?;
        save_checkpoint(&model, &dir)?;
        let text = serde_json::to_string(&log).expect("log serializes");
        fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
        Ok((model, log))
    }

    /// Pretrains the model, or reuses a cached one trained with the same settings.
    pub fn train(&self) -> Result<StageManifest> {
        let mut run = StageRun::begin(self, Stage::Train)?;
        let world = run.world()?;
        let (model, log) = self.cached_model(&world)?;
        save_checkpoint(&model, &run.path("model"))?;
        run.record("model/manifest.json")?;
        run.record("model/weights.bin")?;
        run.write("train-log.csv", &log.to_csv())?;
        run.manifest.model_hash = Some(model.hash());
        run.finish()
    }

    /// Attribution tables over all cultures and per culture, and the Taylor check.
    pub fn score(&self) -> Result<StageManifest> {
        let mut run = StageRun::begin(self, Stage::Score)?;
        let world = run.world()?;
        let model = run.model()?;
        let variant = self.config.score.variant;
        for name in SCORED {
            let d = run.dataset(name)?;
            run.write(&format!("{name}.csv"), &aggregate(&model, &d, variant)?.to_csv())?;
            for c in &world.cultures {
                let t = aggregate_culture(&model, &d, c, variant)?;
                run.write(&format!("{name}.{c}.csv"), &t.to_csv())?;
            }
        }
        let mcq = run.dataset("mcq-neur")?;
        let taylor = taylor_report(
            &model,
            &mcq.instances,
            self.config.score.taylor_per_decile,
            derive_seed(&[self.config.seed, 0x7A]),
        )?;
        run.write("taylor.csv", &taylor.to_csv())?;
        let mut s = Summary::default();
        for d in &taylor.deciles {
            s.put(format!("taylor.decile{}.sign_agreement", d.decile), d.sign_agreement);
            s.put(format!("taylor.decile{}.spearman", d.decile), d.spearman.unwrap_or(f64::NAN));
        }
        s.put("taylor.all.sign_agreement", taylor.sign_agreement);
        s.put("taylor.all.spearman", taylor.spearman.unwrap_or(f64::NAN));
        run.write("summary.csv", &s.to_csv())?;
        run.finish()
    }

    fn table(&self, run: &mut StageRun<'_>, rel: &str) -> Result<ScoreTable> {
        let text = fs::read_to_string(run.input(rel)?).map_err(|e| Error::io(rel, e))?;
        let t = ScoreTable::from_csv(&text)?;
        run.check_model_hash(&t.meta.model_hash)?;
        Ok(t)
    }

    fn stamp(&self, set: &mut NeuronSet) {
        set.provenance.extra.insert("tool".into(), TOOL.into());
        set.provenance.extra.insert("config_hash".into(), self.config.hash());
    }

    /// Culture-general sets with and without the CRC filter, and one culture-specific set per culture.
    pub fn select(&self) -> Result<StageManifest> {
        let mut run = StageRun::begin(self, Stage::Select)?;
        let world = run.world()?;
        let model = run.model()?;
        let cfg = &self.config.selection;
        let neur = self.table(&mut run, "score/mcq-neur.csv")?;
        let ctrl = self.table(&mut run, "score/ctrl.csv")?;
        let crc = self.table(&mut run, "score/crc-neur.csv")?;
        let mut general = select_general(model.config(), &neur, &ctrl, &crc, cfg)?;
        if general.is_empty() {
            return Err(Error::Empty("culture-general selection has no members".into()));
        }
        self.stamp(&mut general);
        run.write("general.set", &general.to_text()?)?;
        let unfiltered = crate::selection::SelectionConfig {
            r_crc: 0.0,
            ..cfg.clone()
        };
        let mut nocrc = select_general(model.config(), &neur, &ctrl, &crc, &unfiltered)?;
        self.stamp(&mut nocrc);
        run.write("general-nocrc.set", &nocrc.to_text()?)?;

        let mut per_culture = Vec::new();
        let mut crc_by_culture = BTreeMap::new();
        for c in &world.cultures {
            per_culture.push(CultureScores {
                neur: self.table(&mut run, &format!("score/mcq-neur.{c}.csv"))?,
                ctrl: self.table(&mut run, &format!("score/ctrl.{c}.csv"))?,
            });
            crc_by_culture.insert(c.clone(), self.table(&mut run, &format!("score/crc-neur.{c}.csv"))?);
        }
        for c in &world.cultures {
            let mut set = select_specific(model.config(), &per_culture, &crc_by_culture[c], c, cfg)?;
            self.stamp(&mut set);
            run.write(&format!("specific-{c}.set"), &set.to_text()?)?;
        }

        let dist = Distribution::new(general.mask(), model.config());
        run.write("general-distribution.csv", &dist.to_csv())?;
        run.write("general-distribution.svg", &dist.to_svg())?;
        let mut modules = String::from("module,count,params\n");
        for m in rank_modules_by_neuron_count(&general, model.config()) {
            let _ = writeln!(modules, "{},{},{}", m.module, m.count, m.params);
        }
        run.write("general-modules.csv", &modules)?;
        run.finish()
    }

    /// Masked evaluations, the random-mask baseline, bootstrap test and cross-culture matrix.
    pub fn ablate(&self) -> Result<StageManifest> {
        let mut run = StageRun::begin(self, Stage::Ablate)?;
        let world = run.world()?;
        let model = run.model()?;
        let general = run.set("general")?;
        let nocrc = run.set("general-nocrc")?;
        let none = NeuronMask::empty();
        let mut s = Summary::default();
        let mut unmasked = BTreeMap::new();
        for name in ABLATED {
            let d = run.dataset(name)?;
            let base = eval_accuracy(&model, &d, &none, "none")?;
            let masked = eval_accuracy(&model, &d, general.mask(), "general")?;
            run.write(&format!("{name}/none.csv"), &base.to_csv())?;
            run.write(&format!("{name}/general.csv"), &masked.to_csv())?;
            s.put(format!("{name}.none"), base.value);
            s.put(format!("{name}.general"), masked.value);
            s.put(format!("{name}.drop"), base.value - masked.value);
            if name == "crc-test" {
                let r = eval_accuracy(&model, &d, nocrc.mask(), "general-nocrc")?;
                run.write(&format!("{name}/general-nocrc.csv"), &r.to_csv())?;
                s.put(format!("{name}.general-nocrc"), r.value);
                s.put(format!("{name}.drop-nocrc"), base.value - r.value);
            }
            unmasked.insert(name, (d, base));
        }
        let total = model.config().tappable_count();
        s.put("general.size", general.len() as f64);
        s.put("general.percent", 100.0 * general.len() as f64 / total as f64);
        s.put("general-nocrc.size", nocrc.len() as f64);

        let (test, test_base) = &unmasked["mcq-test"];
        let seeds: Vec<u64> = (0..self.config.ablation.random_seeds as u64)
            .map(|i| derive_seed(&[self.config.seed, 0x4D, i]))
            .collect();
        let baseline = random_mask_baseline(&model, test, &composition(general.mask()), &seeds, test_base)?;
        run.write("mcq-test/random.csv", &baseline.to_csv())?;
        let drop = s.get("mcq-test.drop")?;
        let p = bootstrap_pvalue(
            drop,
            &baseline.drops,
            self.config.ablation.bootstrap_samples,
            derive_seed(&[self.config.seed, 0xB0]),
        )?;
        s.put("mcq-test.random-mean-drop", baseline.mean_drop());
        s.put("mcq-test.bootstrap-p", p);

        let mut masks = Vec::new();
        let mut tests = Vec::new();
        for c in &world.cultures {
            let set = run.set(&format!("specific-{c}"))?;
            s.put(format!("specific.{c}.size"), set.len() as f64);
            masks.push((c.clone(), set.mask().clone()));
            tests.push((c.clone(), test.for_culture(c)));
        }
        let matrix = cross_culture_matrix(&model, &masks, &tests)?;
        run.write("cross-culture.csv", &matrix.to_csv())?;
        s.put("cross-culture.diagonal-rank-one", matrix.diagonal_rank_one() as f64);
        run.write("summary.csv", &s.to_csv())?;
        run.finish()
    }

    /// Top- and bottom-culture module budgets, each fine-tuned at every configured lr.
    pub fn finetune(&self) -> Result<StageManifest> {
        let mut run = StageRun::begin(self, Stage::Finetune)?;
        let model = run.model()?;
        let general = run.set("general")?;
        let train = run.dataset("target-train")?;
        let target = run.dataset("target-test")?;
        let mcq = run.dataset("mcq-test")?;
        let fc = &self.config.finetune;
        let budgets = [
            ("top", select_modules(&general, model.config(), BudgetStrategy::TopCulture, fc.budget_fraction)?),
            (
                "bottom",
                select_modules(
                    &general,
                    model.config(),
                    BudgetStrategy::BottomCulture {
                        seed: derive_seed(&[self.config.seed, fc.bottom_seed]),
                    },
                    fc.budget_fraction,
                )?,
            ),
        ];
        let mut text = String::from("strategy,module,params\n");
        for (name, b) in &budgets {
            for m in &b.modules {
                let _ = writeln!(text, "{name},{m},{}", m.param_count(model.config()));
            }
        }
        run.write("budgets.csv", &text)?;
        let mut s = Summary::default();
        for (i, &lr) in fc.lrs.iter().enumerate() {
            for (name, budget) in &budgets {
                let rc = fc.run_config(lr, derive_seed(&[self.config.seed, 0xF7, i as u64]));
                let (_, trace) = finetune_selective(&model, budget, &train, &target, &[&mcq], &rc)?;
                let tag = format!("{name}-lr{i}");
                run.write(&format!("{tag}.csv"), &trace.to_csv())?;
                run.write(&format!("{tag}-log.csv"), &trace.log.to_csv())?;
                let (first, last) = (trace.first().expect("initial point"), trace.last().expect("final point"));
                s.put(format!("{tag}.lr"), lr);
                s.put(format!("{tag}.target-before"), first.target_accuracy);
                s.put(format!("{tag}.target-after"), last.target_accuracy);
                let (before, after) = (first.monitored["mcq-test"], last.monitored["mcq-test"]);
                s.put(format!("{tag}.mcq-test-before"), before);
                s.put(format!("{tag}.mcq-test-after"), after);
                s.put(format!("{tag}.mcq-test-drop"), before - after);
            }
        }
        run.write("summary.csv", &s.to_csv())?;
        run.finish()
    }

    /// Re-verifies every recorded hash in the chain and merges the stage summaries.
    pub fn report(&self) -> Result<StageManifest> {
        let mut run = StageRun::begin(self, Stage::Report)?;
        let manifests = Stage::Report
            .upstream()
            .iter()
            .map(|&st| StageManifest::read(&self.out, st))
            .collect::<Result<Vec<_>>>()?;
        let mut produced: BTreeMap<&String, &String> = BTreeMap::new();
        for m in &manifests {
            for (rel, sha) in &m.inputs {
                if produced.get(rel) != Some(&sha) {
                    return Err(Error::Provenance(format!(
                        "stage '{}' read {rel} with hash {sha}, which no earlier stage produced",
                        m.stage
                    )));
                }
            }
            for (rel, sha) in &m.outputs {
                let actual = sha256_file(&self.out.join(rel))?;
                if &actual != sha {
                    return Err(Error::Provenance(format!("{rel} has hash {actual}, stage '{}' recorded {sha}", m.stage)));
                }
                produced.insert(rel, sha);
            }
        }
        let hashes: Vec<&String> = manifests.iter().filter_map(|m| m.model_hash.as_ref()).collect();
        if let Some(first) = hashes.first() {
            if let Some(other) = hashes.iter().find(|h| h != &first) {
                return Err(Error::Provenance(format!("model hashes {first} and {other} both appear in the chain")));
            }
            run.manifest.model_hash = Some((*first).clone());
        }
        let mut merged = Summary::default();
        for st in [Stage::Score, Stage::Ablate, Stage::Finetune] {
            let rel = format!("{st}/summary.csv");
            let text = fs::read_to_string(run.input(&rel)?).map_err(|e| Error::io(&rel, e))?;
            for (k, v) in Summary::from_csv(&text)?.rows {
                merged.put(format!("{st}.{k}"), v);
            }
        }
        run.write("summary.csv", &merged.to_csv())?;
        let svg_rel = "select/general-distribution.svg";
        let svg = fs::read_to_string(run.input(svg_rel)?).map_err(|e| Error::io(svg_rel, e))?;
        run.write("general-distribution.svg", &svg)?;
        run.finish()
    }

    /// The merged summary written by the report stage.
    pub fn summary(&self) -> Result<Summary> {
        let path = self.stage_dir(Stage::Report).join("summary.csv");
        Summary::from_csv(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
    }
}
