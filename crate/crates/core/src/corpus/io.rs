//! Plain-text corpus files and the corpus manifest.
//!
//! A parallel corpus for `a-b` is the file pair `<name>.a-b.a` / `<name>.a-b.b`
//! with aligned lines; a monolingual corpus is `<name>.a`; an n-way
//! evaluation set is one `<name>.<lang>` file per language. Files are UTF-8
//! with LF line endings and one sentence per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Corpus, DevSet, Direction, LanguageId, MonoCorpus, Origin, SentencePair};
use crate::error::{Error, Result, ResultExt};
use crate::kv::{Document, Section};

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        let l = l.as_ref();
        if l.contains('\n') {
            return Err(Error::invalid(format!("line {l:?} contains a newline")));
        }
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::from(e).context(path.display()))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display()))?;
    if text.contains('\r') {
        return Err(Error::format(format!("{}: CR line endings are not allowed", path.display())));
    }
    Ok(text.lines().map(str::to_string).collect())
}

pub fn parallel_paths(dir: &Path, name: &str, direction: &Direction) -> (PathBuf, PathBuf) {
    let stem = format!("{name}.{}-{}", direction.src, direction.tgt);
    (
        dir.join(format!("{stem}.{}", direction.src)),
        dir.join(format!("{stem}.{}", direction.tgt)),
    )
}

pub fn write_parallel(dir: &Path, name: &str, corpus: &Corpus) -> Result<(PathBuf, PathBuf)> {
    let (ps, pt) = parallel_paths(dir, name, &corpus.direction);
    let src: Vec<&str> = corpus.pairs().iter().map(|p| p.src.as_str()).collect();
    let tgt: Vec<&str> = corpus.pairs().iter().map(|p| p.tgt.as_str()).collect();
    write_lines(&ps, &src)?;
    write_lines(&pt, &tgt)?;
    Ok((ps, pt))
}

pub fn read_parallel(dir: &Path, name: &str, direction: &Direction, origin: Origin) -> Result<Corpus> {
    let (ps, pt) = parallel_paths(dir, name, direction);
    let src = read_lines(&ps)?;
    let tgt = read_lines(&pt)?;
    if src.len() != tgt.len() {
        return Err(Error::format(format!(
            "{} has {} lines but {} has {}",
            ps.display(),
            src.len(),
            pt.display(),
            tgt.len()
        )));
    }
    let mut corpus = Corpus::new(direction.clone());
    for (i, (s, t)) in src.into_iter().zip(tgt).enumerate() {
        let pair = SentencePair::new(direction.src.clone(), direction.tgt.clone(), s, t, origin)
            .with_context(|| format!("{} line {}", ps.display(), i + 1))?;
        corpus.push(pair)?;
    }
    Ok(corpus)
}

pub fn mono_path(dir: &Path, name: &str, lang: &LanguageId) -> PathBuf {
    dir.join(format!("{name}.{lang}"))
}

pub fn write_mono(dir: &Path, name: &str, mono: &MonoCorpus) -> Result<PathBuf> {
    let p = mono_path(dir, name, &mono.lang);
    write_lines(&p, mono.sentences())?;
    Ok(p)
}

pub fn read_mono(dir: &Path, name: &str, lang: &LanguageId) -> Result<MonoCorpus> {
    let p = mono_path(dir, name, lang);
    MonoCorpus::new(lang.clone(), read_lines(&p)?).context(p.display())
}

pub fn write_devset(dir: &Path, name: &str, dev: &DevSet) -> Result<()> {
    for (lang, lines) in dev.langs.iter().zip(&dev.sentences) {
        write_lines(&mono_path(dir, name, lang), lines)?;
    }
    Ok(())
}

pub fn read_devset(dir: &Path, name: &str, langs: &[LanguageId]) -> Result<DevSet> {
    let sentences = langs
        .iter()
        .map(|l| read_lines(&mono_path(dir, name, l)))
        .collect::<Result<Vec<_>>>()?;
    DevSet::new(langs.to_vec(), sentences).context(format!("dev set `{name}`"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelEntry {
    pub direction: Direction,
    pub count: usize,
    pub cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonoEntry {
    pub lang: LanguageId,
    pub count: usize,
    pub cap: Option<usize>,
}

/// Index of the corpora that make up one task.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub name: String,
    pub languages: Vec<LanguageId>,
    pub parallel: Vec<ParallelEntry>,
    pub mono: Vec<MonoEntry>,
    pub dev: Option<String>,
    pub devtest: Option<String>,
}

/// Everything a manifest points to, loaded in memory.
#[derive(Debug, Clone)]
pub struct LoadedCorpora {
    pub languages: Vec<LanguageId>,
    pub parallel: Vec<Corpus>,
    pub mono: Vec<MonoCorpus>,
    pub dev: Option<DevSet>,
    pub devtest: Option<DevSet>,
}

impl CorpusManifest {
    pub fn to_document(&self) -> Document {
        let mut doc = Document::default();
        let mut head = Section::new("corpus");
        head.push("name", &self.name);
        head.push(
            "languages",
            self.languages.iter().map(|l| l.code()).collect::<Vec<_>>().join(", "),
        );
        if let Some(d) = &self.dev {
            head.push("dev", d);
        }
        if let Some(d) = &self.devtest {
            head.push("devtest", d);
        }
        doc.push(head);
        for p in &self.parallel {
            let mut s = Section::new(format!("parallel.{}", p.direction));
            s.push("count", p.count);
            if let Some(c) = p.cap {
                s.push("cap", c);
            }
            doc.push(s);
        }
        for m in &self.mono {
            let mut s = Section::new(format!("mono.{}", m.lang));
            s.push("count", m.count);
            if let Some(c) = m.cap {
                s.push("cap", c);
            }
            doc.push(s);
        }
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        let head = doc
            .section("corpus")
            .ok_or_else(|| Error::config("manifest has no [corpus] section"))?;
        head.check_keys(&["name", "languages", "dev", "devtest"])?;
        let languages: Vec<LanguageId> = head
            .parse_list("languages")?
            .ok_or_else(|| head.key_error("languages", "missing"))?;
        let mut parallel = Vec::new();
        let mut mono = Vec::new();
        for s in &doc.sections {
            if let Some(d) = s.name.strip_prefix("parallel.") {
                s.check_keys(&["count", "cap"])?;
                let direction: Direction = d.parse().map_err(|e| s.error(e))?;
                parallel.push(ParallelEntry {
                    direction,
                    count: s.parse("count")?.ok_or_else(|| s.key_error("count", "missing"))?,
                    cap: s.parse("cap")?,
                });
            } else if let Some(l) = s.name.strip_prefix("mono.") {
                s.check_keys(&["count", "cap"])?;
                mono.push(MonoEntry {
                    lang: l.parse().map_err(|e| s.error(e))?,
                    count: s.parse("count")?.ok_or_else(|| s.key_error("count", "missing"))?,
                    cap: s.parse("cap")?,
                });
            } else if s.name != "corpus" {
                return Err(s.error("unknown manifest section"));
            }
        }
        Ok(CorpusManifest {
            name: head.require("name")?.to_string(),
            languages,
            parallel,
            mono,
            dev: head.get("dev").map(str::to_string),
            devtest: head.get("devtest").map(str::to_string),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_document().render()).map_err(|e| Error::from(e).context(path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display()))?;
        Self::from_document(&Document::parse(&text)?).context(path.display())
    }

    /// Loads every listed corpus from `dir`, checking counts and applying caps.
    pub fn load(&self, dir: &Path) -> Result<LoadedCorpora> {
        let mut parallel = Vec::new();
        for p in &self.parallel {
            let c = read_parallel(dir, &self.name, &p.direction, Origin::Parallel)?;
            if c.len() != p.count {
                return Err(Error::config(format!(
                    "manifest lists {} pairs for {} but the files hold {}",
                    p.count,
                    p.direction,
                    c.len()
                )));
            }
            let c = match p.cap {
                Some(cap) if cap < c.len() => Corpus::from_pairs(c.direction.clone(), c.pairs()[..cap].to_vec())?,
                _ => c,
            };
            parallel.push(c);
        }
        let mut mono = Vec::new();
        for m in &self.mono {
            let c = read_mono(dir, &self.name, &m.lang)?;
            if c.len() != m.count {
                return Err(Error::config(format!(
                    "manifest lists {} sentences for {} but the file holds {}",
                    m.count,
                    m.lang,
                    c.len()
                )));
            }
            mono.push(match m.cap {
                Some(cap) => c.truncated(cap),
                None => c,
            });
        }
        let dev = self.dev.as_deref().map(|n| read_devset(dir, n, &self.languages)).transpose()?;
        let devtest = self
            .devtest
            .as_deref()
            .map(|n| read_devset(dir, n, &self.languages))
            .transpose()?;
        Ok(LoadedCorpora {
            languages: self.languages.clone(),
            parallel,
            mono,
            dev,
            devtest,
        })
    }
}

/// Parallel corpora keyed by their file stem, both reading directions.
pub fn corpus_set(parallel: &[Corpus]) -> BTreeMap<String, Corpus> {
    let mut out = BTreeMap::new();
    for c in parallel {
        out.insert(format!("parallel.{}", c.direction), c.clone());
        let r = c.reversed();
        out.insert(format!("parallel.{}", r.direction), r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::cipher::{generate_cipher_task, CipherTaskConfig};

    #[test]
    fn manifest_roundtrip_and_load() {
        let a = LanguageId::new("xa").unwrap();
        let b = LanguageId::new("xb").unwrap();
        let mut cfg = CipherTaskConfig::minimal(a.clone(), b.clone());
        cfg.parallel_sizes.insert((a.clone(), b.clone()), 12);
        cfg.mono_sizes.insert(b.clone(), 4);
        cfg.dev_size = 6;
        let task = generate_cipher_task(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_parallel(dir.path(), "t", &task.parallel[0]).unwrap();
        write_mono(dir.path(), "t", &task.mono[0]).unwrap();
        write_devset(dir.path(), "dev", &task.dev).unwrap();
        assert!(dir.path().join("t.xa-xb.xa").exists());
        assert!(dir.path().join("t.xa-xb.xb").exists());
        assert!(dir.path().join("t.xb").exists());
        let manifest = CorpusManifest {
            name: "t".into(),
            languages: vec![a.clone(), b.clone()],
            parallel: vec![ParallelEntry {
                direction: task.parallel[0].direction.clone(),
                count: 12,
                cap: Some(10),
            }],
            mono: vec![MonoEntry {
                lang: b.clone(),
                count: 4,
                cap: None,
            }],
            dev: Some("dev".into()),
            devtest: None,
        };
        let path = dir.path().join("manifest.cfg");
        manifest.write(&path).unwrap();
        let back = CorpusManifest::read(&path).unwrap();
        assert_eq!(back, manifest);
        let loaded = back.load(dir.path()).unwrap();
        assert_eq!(loaded.parallel[0].len(), 10);
        assert_eq!(loaded.parallel[0].pairs(), &task.parallel[0].pairs()[..10]);
        assert_eq!(loaded.mono[0], task.mono[0]);
        assert_eq!(loaded.dev.as_ref(), Some(&task.dev));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let d: Direction = "xa-xb".parse().unwrap();
        write_lines(&dir.path().join("t.xa-xb.xa"), &["a b"]).unwrap();
        write_lines(&dir.path().join("t.xa-xb.xb"), &["c d"]).unwrap();
        let manifest = CorpusManifest {
            name: "t".into(),
            languages: vec![d.src.clone(), d.tgt.clone()],
            parallel: vec![ParallelEntry {
                direction: d,
                count: 2,
                cap: None,
            }],
            mono: vec![],
            dev: None,
            devtest: None,
        };
        assert!(manifest.load(dir.path()).unwrap_err().is_config());
    }

    #[test]
    fn crlf_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, "a\r\nb\r\n").unwrap();
        assert!(read_lines(&p).is_err());
    }
}
