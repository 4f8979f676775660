//! On-disk corpus directory: JSONL splits, label files, metadata and a
//! SHA-256 manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use boottod_core::checkpoint::sha256_hex;
use boottod_core::data::synthetic::{SyntheticConfig, SyntheticCorpus};
use boottod_core::data::{load_corpus, load_labels, write_corpus, write_labels, Dialogue, DialogueLabels};
use boottod_core::Error;
use serde::{Deserialize, Serialize};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub intents: Vec<String>,
    pub ood_intents: Vec<String>,
    pub acts: Vec<String>,
    pub generator: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub files: BTreeMap<String, String>,
}

pub struct Corpus {
    pub dir: PathBuf,
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

fn split_file(split: &str) -> String {
    format!("{split}.jsonl")
}

fn label_file(split: &str) -> String {
    format!("{split}.labels.jsonl")
}

pub fn write_synthetic(dir: &Path, corpus: &SyntheticCorpus, cfg: &SyntheticConfig) -> Result<CorpusManifest, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let splits: [(&str, &[Dialogue], &[DialogueLabels]); 3] = [
        ("train", &corpus.train, &corpus.train_labels),
        ("dev", &corpus.dev, &corpus.dev_labels),
        ("test", &corpus.test, &corpus.test_labels),
    ];
    for (name, dialogues, labels) in splits {
        write_corpus(&dir.join(split_file(name)), dialogues)?;
        write_labels(&dir.join(label_file(name)), labels)?;
    }
    let meta = CorpusMeta {
        intents: corpus.intents.clone(),
        ood_intents: corpus.ood_intents.clone(),
        acts: corpus.acts.clone(),
        generator: Some(cfg.clone()),
    };
    write_json(&dir.join(META_FILE), &meta)?;

    let mut files = BTreeMap::new();
    for name in SPLITS {
        for f in [split_file(name), label_file(name)] {
            files.insert(f.clone(), hash_file(&dir.join(&f))?);
        }
    }
    files.insert(META_FILE.to_string(), hash_file(&dir.join(META_FILE))?);
    let manifest = CorpusManifest { files };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn hash_file(path: &Path) -> Result<String, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self, Error> {
        if !dir.is_dir() {
            return Err(Error::Data(format!("corpus directory {} does not exist", dir.display())));
        }
        let read = |split: &str| -> Result<Vec<Dialogue>, Error> {
            let p = dir.join(split_file(split));
            if p.exists() {
                load_corpus(&p)
            } else {
                Ok(Vec::new())
            }
        };
        let corpus = Self {
            dir: dir.to_path_buf(),
            train: read("train")?,
            dev: read("dev")?,
            test: read("test")?,
        };
        if corpus.train.is_empty() {
            return Err(Error::Data(format!("{}: the train split is empty or missing", dir.display())));
        }
        Ok(corpus)
    }

    pub fn split(&self, name: &str) -> &[Dialogue] {
        match name {
            "train" => &self.train,
            "dev" => &self.dev,
            _ => &self.test,
        }
    }

    pub fn all(&self) -> Vec<Dialogue> {
        self.train.iter().chain(&self.dev).chain(&self.test).cloned().collect()
    }

    pub fn labels(&self, split: &str) -> Result<Vec<DialogueLabels>, Error> {
        let p = self.dir.join(label_file(split));
        if !p.exists() {
            return Err(Error::Data(format!("missing label file {}", p.display())));
        }
        load_labels(&p)
    }

    pub fn meta(&self) -> Result<CorpusMeta, Error> {
        let p = self.dir.join(META_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::Data(format!("missing corpus metadata {}: {e}", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
