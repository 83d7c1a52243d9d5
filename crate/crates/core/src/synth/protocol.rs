//! Verification and identification protocols over a dataset split.
//!
//! Text format, one entry per line after a header:
//!
//! ```text
//! # aird-protocol verify 1
//! 12 40 1
//! 12 97 0
//! ```
//!
//! ```text
//! # aird-protocol identify 1
//! gallery 12
//! probe 13
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Protocol {
    Verify(Vec<VerifyPair>),
    Identify {
        gallery: Vec<usize>,
        probes: Vec<usize>,
    },
}

fn by_label(ds: &Dataset, split: Split) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in ds.indices(split) {
        groups.entry(ds.labels[i]).or_default().push(i);
    }
    groups
}

/// Balanced verification pairs: `pair_count / 2` same-identity pairs and as
/// many different-identity pairs, drawn without replacement.
pub fn build_verify(ds: &Dataset, split: Split, pair_count: usize, seed: u64) -> Result<Protocol> {
    if pair_count == 0 || pair_count % 2 != 0 {
        return Err(Error::Config(format!(
            "pair_count must be positive and even, got {pair_count}"
        )));
    }
    let half = pair_count / 2;
    let idx = ds.indices(split);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (k, &a) in idx.iter().enumerate() {
        for &b in &idx[k + 1..] {
            let same = ds.labels[a] == ds.labels[b];
            let p = VerifyPair { a, b, same };
            if same {
                pos.push(p);
            } else {
                neg.push(p);
            }
        }
    }
    for (what, have) in [("positive", pos.len()), ("negative", neg.len())] {
        if have < half {
            return Err(Error::Config(format!(
                "split {split:?} offers {have} {what} pairs, {half} requested (short by {})",
                half - have
            )));
        }
    }
    let stream = SeedStream::new(seed).child("verify");
    pos.shuffle(&mut stream.rng("positives"));
    neg.shuffle(&mut stream.rng("negatives"));
    let mut pairs: Vec<VerifyPair> = pos
        .into_iter()
        .take(half)
        .chain(neg.into_iter().take(half))
        .collect();
    pairs.shuffle(&mut stream.rng("order"));
    Ok(Protocol::Verify(pairs))
}

/// Gallery/probe partition: per identity, `gallery_per_id` samples go to
/// the gallery and the rest become probes.
pub fn build_identify(
    ds: &Dataset,
    split: Split,
    gallery_per_id: usize,
    seed: u64,
) -> Result<Protocol> {
    if gallery_per_id == 0 {
        return Err(Error::Config("gallery_per_id must be positive".into()));
    }
    let stream = SeedStream::new(seed).child("identify");
    let (mut gallery, mut probes) = (Vec::new(), Vec::new());
    for (label, mut members) in by_label(ds, split) {
        if members.len() <= gallery_per_id {
            return Err(Error::Config(format!(
                "identity {label} has {} samples in {split:?}, needs more than {gallery_per_id} (short by {})",
                members.len(),
                gallery_per_id + 1 - members.len()
            )));
        }
        members.shuffle(&mut stream.index(label as u64).rng("split"));
        gallery.extend_from_slice(&members[..gallery_per_id]);
        probes.extend_from_slice(&members[gallery_per_id..]);
    }
    if gallery.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty")));
    }
    gallery.sort_unstable();
    probes.sort_unstable();
    Ok(Protocol::Identify { gallery, probes })
}

pub fn to_text(p: &Protocol) -> String {
    match p {
        Protocol::Verify(pairs) => {
            let mut s = String::from("# aird-protocol verify 1\n");
            for q in pairs {
                s.push_str(&format!("{} {} {}\n", q.a, q.b, q.same as u8));
            }
            s
        }
        Protocol::Identify { gallery, probes } => {
            let mut s = String::from("# aird-protocol identify 1\n");
            for g in gallery {
                s.push_str(&format!("gallery {g}\n"));
            }
            for q in probes {
                s.push_str(&format!("probe {q}\n"));
            }
            s
        }
    }
}

pub fn parse(text: &str) -> Result<Protocol> {
    let mut lines = text.lines().enumerate();
    let bad = |n: usize, m: &str| Error::Format(format!("protocol line {}: {m}", n + 1));
    let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    let num = |n: usize, s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(n, &format!("bad index {s:?}")))
    };
    match header {
        "# aird-protocol verify 1" => {
            let mut pairs = Vec::new();
            for (n, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
                let f: Vec<&str> = line.split_whitespace().collect();
                let [a, b, same] = f[..] else {
                    return Err(bad(n, "expected `idx_a idx_b same`"));
                };
                let same = match same {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad(n, "same flag must be 0 or 1")),
                };
                pairs.push(VerifyPair {
                    a: num(n, a)?,
                    b: num(n, b)?,
                    same,
                });
            }
            Ok(Protocol::Verify(pairs))
        }
        "# aird-protocol identify 1" => {
            let (mut gallery, mut probes) = (Vec::new(), Vec::new());
            for (n, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
                match line.split_whitespace().collect::<Vec<_>>()[..] {
                    ["gallery", i] => gallery.push(num(n, i)?),
                    ["probe", i] => probes.push(num(n, i)?),
                    _ => return Err(bad(n, "expected `gallery idx` or `probe idx`")),
                }
            }
            Ok(Protocol::Identify { gallery, probes })
        }
        other => Err(Error::Format(format!("unknown protocol header {other:?}"))),
    }
}

pub fn save(p: &Protocol, path: &Path) -> Result<()> {
    fs::write(path, to_text(p)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Protocol> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::dataset::{generate_dataset, DataConfig, ShiftConfig};

    fn ds() -> Dataset {
        let cfg = DataConfig {
            num_ids: 5,
            samples_per_id: 10,
            test_per_id: 6,
            shift: ShiftConfig::none(),
            ..DataConfig::default()
        };
        generate_dataset(&cfg, 4).unwrap()
    }

    #[test]
    fn balanced_and_label_consistent() {
        let d = ds();
        let Protocol::Verify(pairs) = build_verify(&d, Split::Test, 100, 1).unwrap() else {
            panic!()
        };
        assert_eq!(pairs.iter().filter(|p| p.same).count(), 50);
        assert_eq!(pairs.iter().filter(|p| !p.same).count(), 50);
        for p in &pairs {
            assert_eq!(p.same, d.labels[p.a] == d.labels[p.b]);
            assert_eq!(d.splits[p.a], Split::Test);
        }
        assert_eq!(
            build_verify(&d, Split::Test, 100, 1).unwrap(),
            Protocol::Verify(pairs)
        );
    }

    #[test]
    fn shortfall_is_reported() {
        // 5 identities × C(6,2) = 75 positive pairs available.
        let err = build_verify(&ds(), Split::Test, 160, 1).unwrap_err();
        assert!(err.to_string().contains("short by 5"), "{err}");
    }

    #[test]
    fn identify_partition() {
        let d = ds();
        let Protocol::Identify { gallery, probes } = build_identify(&d, Split::Test, 2, 3).unwrap()
        else {
            panic!()
        };
        assert_eq!(gallery.len(), 10);
        assert_eq!(probes.len(), 20);
        for p in &probes {
            assert!(!gallery.contains(p));
            assert!(gallery.iter().any(|&g| d.labels[g] == d.labels[*p]));
        }
        assert!(build_identify(&d, Split::Test, 6, 3).is_err());
    }

    #[test]
    fn text_round_trip() {
        let d = ds();
        for p in [
            build_verify(&d, Split::Test, 20, 2).unwrap(),
            build_identify(&d, Split::Test, 1, 2).unwrap(),
        ] {
            assert_eq!(parse(&to_text(&p)).unwrap(), p);
        }
        assert!(parse("# aird-protocol verify 1\n1 2 7\n").is_err());
    }
}
