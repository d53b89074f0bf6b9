use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cultlab::model::{save_checkpoint, Model};
use cultlab::world::{read_jsonl, WorldSpec};

const TINY: &str = r#"
seed = 3

[suite]
variants = 1
crc_per_culture = 4
filler = 8
target_train = 16
target_test = 8

[model]
num_layers = 2
hidden_size = 16
num_heads = 2
head_dim = 8
num_kv_heads = 2
intermediate_size = 32

[pretrain]
steps = 3
batch_size = 8

[score]
taylor_per_decile = 10

[selection]
t_mlp = 5.0
t_attn = 0.0
t_specific = 2.0

[ablation]
random_seeds = 3
bootstrap_samples = 50

[finetune]
steps = 2
lrs = [1e-3]
eval_every = 1
budget_fraction = 0.05
"#;

fn cultlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cultlab"))
        .current_dir(dir)
        .args(["--config", "run.toml", "--out", "out", "--threads", "1"])
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

#[test]
fn generate_is_idempotent_and_refuses_overwrite() {
    let dir = setup();
    assert!(cultlab(dir.path(), &["generate"]).status.success());
    let first = fs::read(dir.path().join("out/generate/mcq-neur.jsonl")).unwrap();
    let again = cultlab(dir.path(), &["generate"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert!(cultlab(dir.path(), &["generate", "--force"]).status.success());
    assert_eq!(first, fs::read(dir.path().join("out/generate/mcq-neur.jsonl")).unwrap());

    let world = WorldSpec::load(&dir.path().join("out/generate/world.json")).unwrap();
    let facts = world.facts().len();
    let mcq = read_jsonl(&dir.path().join("out/generate/mcq-neur.jsonl")).unwrap();
    let test = read_jsonl(&dir.path().join("out/generate/mcq-test.jsonl")).unwrap();
    assert_eq!(mcq.len() + test.len(), facts);
    assert_eq!(read_jsonl(&dir.path().join("out/generate/crc-neur.jsonl")).unwrap().len(), 8 * 2);
    assert_eq!(read_jsonl(&dir.path().join("out/generate/filler.jsonl")).unwrap().len(), 8);
    assert!(dir.path().join("out/generate/config.toml").exists());
}

#[test]
fn single_table_scoring_on_a_zero_model() {
    let dir = setup();
    assert!(cultlab(dir.path(), &["generate"]).status.success());
    let world = WorldSpec::load(&dir.path().join("out/generate/world.json")).unwrap();
    let cfg = cultlab::ModelConfig {
        vocab_size: world.vocab.len(),
        ..cultlab::ModelConfig::desk(0, 20)
    };
    let universe = cfg.tappable_count();
    save_checkpoint(&Model::zeros(cfg).unwrap(), &dir.path().join("zero")).unwrap();
    let args = ["score", "--model", "zero", "--dataset", "out/generate/ctrl.jsonl", "--output"];
    assert!(cultlab(dir.path(), &[&args[..], &["a.csv"]].concat()).status.success());
    assert!(cultlab(dir.path(), &[&args[..], &["b.csv"]].concat()).status.success());
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
    let rows: Vec<&str> = a.lines().skip(2).collect();
    assert_eq!(rows.len(), universe);
    assert!(rows.iter().all(|r| r.ends_with(",0e0")), "{}", rows[0]);
    assert_eq!(cultlab(dir.path(), &[&args[..], &["a.csv"]].concat()).status.code(), Some(2));
}

#[test]
fn full_run_then_stale_upstream_is_a_provenance_error() {
    let dir = setup();
    let out = cultlab(dir.path(), &["run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("key,value\n"));
    let stale = cultlab(dir.path(), &["select", "--force", "--set", "selection.t_mlp=6"]);
    assert_eq!(stale.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&stale.stderr).contains("provenance"));
}

#[test]
fn empty_selection_exits_nonzero() {
    let dir = setup();
    for stage in ["generate", "train", "score"] {
        assert!(cultlab(dir.path(), &[stage, "--set", "selection.t_mlp=0"]).status.success());
    }
    let out = cultlab(dir.path(), &["select", "--set", "selection.t_mlp=0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = setup();
    assert_eq!(cultlab(dir.path(), &["config", "--set", "selection.r_crc=101"]).status.code(), Some(2));
    assert_eq!(cultlab(dir.path(), &["config", "--set", "nonsense=1"]).status.code(), Some(2));
    let ok = cultlab(dir.path(), &["config", "--set", "selection.r_crc=2"]);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("r_crc = 2.0"));
}
