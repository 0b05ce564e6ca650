//! Teacher spec files: one `path modality` pair per line, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mmdl_core::distill::Teacher;
use mmdl_core::nets::Modality;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::wire::{read_file, write_file};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSpec {
    pub members: Vec<(PathBuf, Modality)>,
}

impl TeacherSpec {
    pub fn new(members: Vec<(PathBuf, Modality)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::config("teacher spec lists no members"));
        }
        for (i, (_, m)) in members.iter().enumerate() {
            if members[..i].iter().any(|(_, o)| o == m) {
                return Err(Error::config(format!("teacher spec repeats modality {m}")));
            }
        }
        Ok(TeacherSpec { members })
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let base = origin.parent().unwrap_or(Path::new(""));
        let mut members = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(path), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(origin, format!("line {}: expected `path modality`", n + 1)));
            };
            let modality: Modality = tag.parse()?;
            let path = PathBuf::from(path);
            members.push((if path.is_relative() { base.join(path) } else { path }, modality));
        }
        Self::new(members)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (p, m) in &self.members {
            writeln!(out, "{} {m}", p.display()).unwrap();
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not utf-8"))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.render().as_bytes())
    }

    /// Loads every member checkpoint, checking it holds the tagged modality.
    pub fn load(&self) -> Result<Teacher> {
        let mut params = Vec::with_capacity(self.members.len());
        for (path, modality) in &self.members {
            let wrap = |e: Error| Error::Checkpoint {
                member: format!("{} ({modality})", path.display()),
                source: Box::new(e),
            };
            let p = checkpoint::load(path).map_err(wrap)?;
            if p.modality != *modality {
                return Err(wrap(Error::config(format!("checkpoint holds a {} model", p.modality))));
            }
            params.push(p);
        }
        Ok(Teacher::new(params)?)
    }

    pub fn modalities_label(&self) -> String {
        modalities_label(self.members.iter().map(|(_, m)| *m))
    }
}

/// `rgb+flow+boxes`, in canonical modality order.
pub fn modalities_label(ms: impl IntoIterator<Item = Modality>) -> String {
    let ms: Vec<Modality> = ms.into_iter().collect();
    Modality::ALL
        .iter()
        .filter(|m| ms.contains(m))
        .map(|m| m.as_str())
        .collect::<Vec<_>>()
        .join("+")
}
