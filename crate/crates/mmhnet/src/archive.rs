//! Tensor archives: a directory holding `manifest.txt` and one or more raw
//! little-endian f64 files.
//!
//! ```text
//! mmhnet-archive 1
//! meta <key> <value>
//! tensor <file> <name> <byte offset> <d0>x<d1>...
//! ```
//!
//! Values round-trip bit-exactly, NaN payloads included.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mmhnet_core::Tensor;

pub const MAGIC: &str = "mmhnet-archive 1";
pub const MANIFEST: &str = "manifest.txt";

/// One raw file's worth of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Group {
    pub file: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub groups: Vec<Group>,
}

impl Archive {
    pub fn single(file: &str, tensors: Vec<(String, Tensor)>) -> Self {
        Self {
            meta: BTreeMap::new(),
            groups: vec![Group { file: file.to_string(), tensors }],
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).with_context(|| format!("archive meta `{key}` missing"))
    }

    pub fn group(&self, file: &str) -> Result<&Group> {
        self.groups.iter().find(|g| g.file == file).with_context(|| format!("archive file `{file}` missing"))
    }
}

fn check_token(s: &str, what: &str) -> Result<()> {
    ensure!(!s.is_empty() && !s.chars().any(char::is_whitespace), "{what} `{s}` must be a non-empty token without whitespace");
    Ok(())
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes `archive` to `dir` through a sibling temporary directory and a
/// rename, replacing any previous content.
pub fn write(dir: &Path, archive: &Archive) -> Result<()> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = dir.file_name().context("archive path has no file name")?.to_string_lossy();
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut manifest = String::from(MAGIC);
    manifest.push('\n');
    for (k, v) in &archive.meta {
        check_token(k, "meta key")?;
        ensure!(!v.contains('\n'), "meta value for `{k}` contains a newline");
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    for g in &archive.groups {
        check_token(&g.file, "file name")?;
        ensure!(g.file != MANIFEST, "raw file may not be called {MANIFEST}");
        let mut bytes = Vec::new();
        for (n, t) in &g.tensors {
            check_token(n, "tensor name")?;
            manifest.push_str(&format!("tensor {} {} {} {}\n", g.file, n, bytes.len(), shape_string(t.shape())));
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(tmp.join(&g.file), bytes)?;
    }
    let mut f = fs::File::create(tmp.join(MANIFEST))?;
    f.write_all(manifest.as_bytes())?;
    f.sync_all()?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir).with_context(|| format!("moving archive into {}", dir.display()))?;
    Ok(())
}

pub fn read(dir: &Path) -> Result<Archive> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some(MAGIC), "{} is not an archive manifest", path.display());
    let mut archive = Archive::default();
    let mut raw: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (no, line) in lines.enumerate() {
        let fields: Vec<&str> = line.splitn(3, ' ').collect();
        match fields.as_slice() {
            ["meta", k, v] => {
                archive.meta.insert(k.to_string(), v.to_string());
            }
            ["meta", k] => {
                archive.meta.insert(k.to_string(), String::new());
            }
            ["tensor", ..] => {
                let parts: Vec<&str> = line.split(' ').collect();
                let [_, file, name, offset, shape] = parts.as_slice() else {
                    bail!("{}:{}: malformed tensor line", path.display(), no + 2);
                };
                if !raw.contains_key(*file) {
                    let bytes = fs::read(dir.join(file)).with_context(|| format!("reading {file}"))?;
                    raw.insert(file.to_string(), bytes);
                }
                let bytes = &raw[*file];
                let offset: usize = offset.parse()?;
                let shape: Vec<usize> = shape.split('x').map(str::parse).collect::<Result<_, _>>()?;
                let n: usize = shape.iter().product();
                let end = offset + 8 * n;
                ensure!(end <= bytes.len(), "tensor {name} runs past the end of {file}");
                let data = bytes[offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                let t = if n == 0 { Tensor::zeros(&shape) } else { Tensor::new(&shape, data)? };
                match archive.groups.iter_mut().find(|g| g.file == *file) {
                    Some(g) => g.tensors.push((name.to_string(), t)),
                    None => archive.groups.push(Group {
                        file: file.to_string(),
                        tensors: vec![(name.to_string(), t)],
                    }),
                }
            }
            _ => bail!("{}:{}: unrecognized line", path.display(), no + 2),
        }
    }
    Ok(archive)
}

/// All files of an archive directory, for hashing and listing.
pub fn files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}
