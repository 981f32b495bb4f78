use std::fs;
use std::path::{Path, PathBuf};

use owod::coco::read_schedule;
use owod::experiment::{RunConfig, Toggles};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn default_config_file_matches_the_built_in_defaults() {
    let cfg = RunConfig::load(&configs().join("default.toml")).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn shipped_configs_validate() {
    for dir in [configs(), configs().join("ablation")] {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let cfg = RunConfig::load(&path).unwrap();
                cfg.validate()
                    .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            }
        }
    }
}

#[test]
fn ablation_rows_add_one_component_each() {
    let rows: Vec<Toggles> = [
        "1-baseline",
        "2-fine-tune-only",
        "3-class-agnostic",
        "4-mixture-check",
        "5-full",
    ]
    .iter()
    .map(|n| {
        RunConfig::load(&configs().join(format!("ablation/{n}.toml")))
            .unwrap()
            .toggles
    })
    .collect();
    let on = |t: &Toggles| {
        [
            t.fine_tune_only,
            t.class_agnostic_detection,
            t.gmm_correction,
            t.prior_class_handling,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    };
    assert_eq!(rows.iter().map(on).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    assert_eq!(rows[4], Toggles::default());
}

#[test]
fn schedule_files_parse() {
    let four = read_schedule(&configs().join("schedules/synthetic-4task.json")).unwrap();
    assert_eq!(four, RunConfig::default().schedule().unwrap());
    let two = read_schedule(&configs().join("schedules/synthetic-2task.json")).unwrap();
    assert_eq!(two.len(), 2);
    let coco = read_schedule(&configs().join("schedules/coco-superclass.json")).unwrap();
    assert_eq!(coco.len(), 4);
    assert_eq!(coco.universe().len(), 80);
}
