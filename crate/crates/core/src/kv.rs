//! Flat `key = value` text format shared by run configs, world specs and
//! ablation grids. One entry per line, `#` starts a comment, UTF-8.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.out.push_str("# ");
        self.out.push_str(text);
        self.out.push('\n');
        self
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn put_list<T: Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let joined = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ");
        self.put(key, joined)
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}

/// Parsed entries. Reading a key consumes it so that leftovers can be
/// reported as unknown keys.
#[derive(Debug, Clone)]
pub struct KvReader {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvReader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::ConfigParse {
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            if entries.insert(k.clone(), (v.trim().to_string(), line_no)).is_some() {
                return Err(Error::ConfigParse {
                    line: line_no,
                    message: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some((v, line)) = self.entries.remove(key) {
            *slot = v.parse().map_err(|e: T::Err| Error::ConfigParse {
                line,
                message: format!("{key}: cannot parse `{v}`: {e}"),
            })?;
        }
        Ok(())
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some((v, line)) = self.entries.remove(key) {
            *slot = parse_list(&v).map_err(|e| Error::ConfigParse {
                line,
                message: format!("{key}: {e}"),
            })?;
        }
        Ok(())
    }

    /// Fails on any key that was never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((k, (_, line))) = self.entries.into_iter().next() {
            return Err(Error::ConfigParse {
                line,
                message: format!("unknown key `{k}`"),
            });
        }
        Ok(())
    }

    pub fn remaining(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (v, _))| (k.as_str(), v.as_str()))
    }
}

pub fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<T>().map_err(|e| format!("cannot parse `{s}`: {e}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let mut r = KvReader::parse("# header\nn = 3 # trailing\n\nxs = 1, 2,3\n").unwrap();
        let mut n = 0usize;
        let mut xs: Vec<u32> = vec![];
        r.take("n", &mut n).unwrap();
        r.take_list("xs", &mut xs).unwrap();
        r.finish().unwrap();
        assert_eq!(n, 3);
        assert_eq!(xs, vec![1, 2, 3]);
    }

    #[test]
    fn reports_unknown_and_bad_lines() {
        let r = KvReader::parse("a = 1\nmystery = 2\n").unwrap();
        let err = r.finish().unwrap_err().to_string();
        assert!(err.contains("a") || err.contains("mystery"));
        assert!(KvReader::parse("no equals sign").is_err());
        assert!(KvReader::parse("a = 1\na = 2").is_err());
        let mut r = KvReader::parse("n = x").unwrap();
        let mut n = 0u32;
        let err = r.take("n", &mut n).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("n:"), "{err}");
    }
}
