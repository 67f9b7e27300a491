//! Self-describing text checkpoints.
//!
//! ```text
//! cia-checkpoint 1
//! meta <key> <json string>
//! tensor <group> <name> <rows> <cols>
//! <rows*cols values in shortest round-trip form>
//! ```
//!
//! Values are written with `{:e}` and parsed back with `str::parse`, which
//! round-trips every `f64` bit pattern except NaN payloads.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &str = "cia-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    /// Named groups of named tensors (e.g. `online`, `target`, `online.ms`).
    pub groups: BTreeMap<String, BTreeMap<String, Tensor>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key}")))
    }

    pub fn group(&self, name: &str) -> Result<&BTreeMap<String, Tensor>> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor group {name}")))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{MAGIC}")?;
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || k.is_empty() {
                return Err(Error::Checkpoint(format!("bad meta key {k:?}")));
            }
            writeln!(out, "meta {k} {}", serde_json::to_string(v)?)?;
        }
        for (group, tensors) in &self.groups {
            for (name, t) in tensors {
                if group.contains(char::is_whitespace) || name.contains(char::is_whitespace) {
                    return Err(Error::Checkpoint(format!("bad tensor name {group}/{name}")));
                }
                writeln!(out, "tensor {group} {name} {} {}", t.rows(), t.cols())?;
                let mut line = String::with_capacity(t.data().len() * 24);
                for (i, v) in t.data().iter().enumerate() {
                    if i > 0 {
                        line.push(' ');
                    }
                    line.push_str(&format!("{v:e}"));
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let corrupt = |what: String| Error::Checkpoint(format!("corrupt checkpoint: {what}"));
        let mut lines = input.lines();
        match lines.next() {
            Some(Ok(l)) if l.trim_end() == MAGIC => {}
            _ => return Err(corrupt("missing header".into())),
        }
        let mut ck = Checkpoint::new();
        while let Some(line) = lines.next() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().ok_or_else(|| corrupt(line.clone()))?;
                    let (key, json) = rest.split_once(' ').ok_or_else(|| corrupt(line.clone()))?;
                    let value: String =
                        serde_json::from_str(json).map_err(|_| corrupt(format!("meta {key}")))?;
                    ck.meta.insert(key.to_string(), value);
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts
                        .next()
                        .ok_or_else(|| corrupt(line.clone()))?
                        .split(' ')
                        .collect();
                    let [group, name, rows, cols] = fields[..] else {
                        return Err(corrupt(line.clone()));
                    };
                    let rows: usize = rows.parse().map_err(|_| corrupt(line.clone()))?;
                    let cols: usize = cols.parse().map_err(|_| corrupt(line.clone()))?;
                    let data_line = lines
                        .next()
                        .ok_or_else(|| corrupt(format!("no data for {name}")))??;
                    let data = if rows * cols == 0 {
                        Vec::new()
                    } else {
                        data_line
                            .split(' ')
                            .map(|v| v.parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| corrupt(format!("values of {name}")))?
                    };
                    let t = Tensor::new(Shape::new(rows, cols), data)
                        .map_err(|_| corrupt(format!("size of {name}")))?;
                    ck.groups
                        .entry(group.to_string())
                        .or_default()
                        .insert(name.to_string(), t);
                }
                _ => return Err(corrupt(format!("unexpected line {line:?}"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(file);
            self.write(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_bit_exactly(values in proptest::collection::vec(any::<f64>().prop_filter("not nan", |v| !v.is_nan()), 1..40)) {
            let n = values.len();
            let mut ck = Checkpoint::new();
            ck.meta.insert("note".into(), "two words\nand a newline".into());
            ck.groups.entry("online".into()).or_default()
                .insert("w".into(), Tensor::new(Shape::new(1, n), values.clone()).unwrap());
            let mut buf = Vec::new();
            ck.write(&mut buf).unwrap();
            let back = Checkpoint::read(buf.as_slice()).unwrap();
            let got = back.group("online").unwrap()["w"].data().to_vec();
            prop_assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.meta, ck.meta);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(Checkpoint::read("garbage\n".as_bytes()).is_err());
        let text = format!("{MAGIC}\ntensor g w 1 2\n1.0\n");
        assert!(Checkpoint::read(text.as_bytes()).is_err());
        let text = format!("{MAGIC}\ntensor g w 1 2\n1.0 abc\n");
        assert!(Checkpoint::read(text.as_bytes()).is_err());
    }
}
