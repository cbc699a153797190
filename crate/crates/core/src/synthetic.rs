//! Labeled synthetic log corpora with planted rare-keyword anomalies.
//!
//! Lines are emitted in blocks of `window` lines. Each block follows one of
//! four workflows, fixed cycles of message types, with occasional
//! background messages mixed in. A chosen share of blocks has one to three
//! lines replaced by messages carrying rare keywords. Variable fields
//! (numbers, addresses, hex values, user names) are randomized, so the
//! lines go through real template mining.
//!
//! System `B` keeps half of system `A`'s message types, swaps the other half
//! for new ones and renames the rare anomaly keywords.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{records_from_keys, windowize, Label, SplitSpec, SystemCorpus};
use crate::error::{MladError, Result};
use crate::logparse::{parse_corpus, ParserConfig};

const SHARED: [&str; 6] = [
    "Receiving block blk_{n} src /{ip} dest /{ip}",
    "PacketResponder {n} for block blk_{n} terminating",
    "Received block blk_{n} of size {n} from /{ip}",
    "NameSystem addStoredBlock blockMap updated {ip} is added to blk_{n} size {n}",
    "Verification succeeded for blk_{n}",
    "Deleting block blk_{n} file /data/dfs/{n}/blk_{n}",
];

const ONLY_A: [&str; 6] = [
    "session opened for user {user} by uid {n}",
    "instruction cache parity error corrected",
    "generating core {n}",
    "CE sym {n} at 0x{hex} mask 0x{hex}",
    "ciod LOGIN chdir /home/{user} succeeded",
    "jobid {n} started on partition {n}",
];

const ONLY_B: [&str; 6] = [
    "Starting service {user} pid {n}",
    "ib_sm sweep completed in {n} ms",
    "smtpd connect from unknown host {ip}",
    "ntpd synchronized to {ip} stratum {n}",
    "dhcpd DHCPACK on {ip} lease {n}",
    "crond running hourly jobs batch {n}",
];

/// Anomaly messages; `{k1}` and `{k2}` are the system's rare keywords.
const ANOMALIES: [&str; 3] = [
    "kernel {k2} {k1} machine check interrupt at 0x{hex}",
    "{k1} error rts {k2} halting node {n}",
    "data TLB error interrupt {k1} {k2} on core {n}",
];

const USERS: [&str; 6] = ["root", "hdfs", "alice", "bob", "mapred", "www"];

/// Which synthetic system to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum System {
    A,
    B,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::A => "A",
            System::B => "B",
        }
    }

    pub fn parse(s: &str) -> Result<System> {
        match s {
            "A" | "a" => Ok(System::A),
            "B" | "b" => Ok(System::B),
            _ => Err(MladError::Config(format!("unknown synthetic system {s:?}"))),
        }
    }

    /// The rare keywords planted in anomalous lines.
    pub fn keywords(self) -> (&'static str, &'static str) {
        match self {
            System::A => ("fatal", "panic"),
            System::B => ("critical", "abort"),
        }
    }

    fn messages(self) -> Vec<&'static str> {
        let own = match self {
            System::A => ONLY_A,
            System::B => ONLY_B,
        };
        SHARED.iter().chain(own.iter()).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub system: System,
    pub windows: usize,
    pub window: usize,
    pub anomaly_rate: f64,
    /// Chance that a line is replaced by a random background message.
    pub background_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(system: System, windows: usize, seed: u64) -> Self {
        SyntheticSpec {
            system,
            windows,
            window: 20,
            anomaly_rate: 0.05,
            background_rate: 0.05,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub system: System,
    pub lines: Vec<String>,
    pub labels: Vec<Label>,
    pub window: usize,
}

fn fill(pattern: &str, system: System, rng: &mut ChaCha8Rng) -> String {
    let (k1, k2) = system.keywords();
    let mut out = String::with_capacity(pattern.len() + 16);
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("balanced pattern");
        match &rest[open + 1..close] {
            "n" => out.push_str(&rng.gen_range(0..100_000u32).to_string()),
            "ip" => {
                let ip: Vec<String> = (0..4).map(|_| rng.gen_range(1..255u8).to_string()).collect();
                out.push_str(&format!("{}:{}", ip.join("."), rng.gen_range(1024..65535u16)));
            }
            "hex" => out.push_str(&format!("{:08x}", rng.gen::<u32>())),
            "user" => out.push_str(USERS.choose(rng).expect("non-empty")),
            "k1" => out.push_str(k1),
            "k2" => out.push_str(k2),
            other => unreachable!("unknown field {other}"),
        }
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    out
}

/// Four workflows over the twelve message types; each cycle length divides
/// the default window of 20.
fn workflows() -> [Vec<usize>; 4] {
    [
        vec![0, 2, 1, 4, 6],
        vec![0, 2, 3, 1, 5, 7, 4, 8, 2, 1],
        vec![9, 10, 11, 6, 3],
        vec![7, 8, 0, 5, 11, 2, 9, 1, 10, 4],
    ]
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.window < 2 || spec.windows == 0 {
        return Err(MladError::Config("synthetic corpus needs windows of >= 2 lines".into()));
    }
    if !(0.0..1.0).contains(&spec.anomaly_rate) || !(0.0..1.0).contains(&spec.background_rate) {
        return Err(MladError::Config("synthetic rates must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (spec.system as u64).wrapping_mul(0x9e37_79b9));
    let messages = spec.system.messages();
    let flows = workflows();
    let n_anom = (spec.anomaly_rate * spec.windows as f64).round() as usize;
    let mut anomalous = vec![false; spec.windows];
    let mut idx: Vec<usize> = (0..spec.windows).collect();
    idx.shuffle(&mut rng);
    for &i in &idx[..n_anom] {
        anomalous[i] = true;
    }
    let mut lines = Vec::with_capacity(spec.windows * spec.window);
    let mut labels = Vec::with_capacity(spec.windows * spec.window);
    for &is_anom in &anomalous {
        let flow = &flows[rng.gen_range(0..flows.len())];
        let phase = rng.gen_range(0..flow.len());
        let mut block: Vec<(String, Label)> = (0..spec.window)
            .map(|p| {
                let m = if rng.gen::<f64>() < spec.background_rate {
                    rng.gen_range(0..messages.len())
                } else {
                    flow[(phase + p) % flow.len()]
                };
                (fill(messages[m], spec.system, &mut rng), Label::Normal)
            })
            .collect();
        if is_anom {
            let count = rng.gen_range(1..=3.min(spec.window));
            let mut pos: Vec<usize> = (0..spec.window).collect();
            pos.shuffle(&mut rng);
            for &p in &pos[..count] {
                let pattern = ANOMALIES.choose(&mut rng).expect("non-empty");
                block[p] = (fill(pattern, spec.system, &mut rng), Label::Anomalous);
            }
        }
        for (line, label) in block {
            lines.push(line);
            labels.push(label);
        }
    }
    Ok(SyntheticCorpus {
        system: spec.system,
        lines,
        labels,
        window: spec.window,
    })
}

impl SyntheticCorpus {
    /// Mines templates and cuts the corpus into its sliding windows.
    pub fn to_system(&self, parser: &ParserConfig) -> Result<SystemCorpus> {
        let parsed = parse_corpus(self.lines.iter().map(String::as_str), parser, None)?;
        let records = records_from_keys(&parsed.keys, &self.labels)?;
        let windows = windowize(&records, &SplitSpec::sliding(self.window, 0), self.system.name())?;
        Ok(SystemCorpus {
            origin: self.system.name().to_string(),
            store: parsed.store,
            windows,
        })
    }

    pub fn labels_text(&self) -> String {
        let mut out = String::with_capacity(self.labels.len() * 2);
        for l in &self.labels {
            out.push(if l.is_anomalous() { '1' } else { '0' });
            out.push('\n');
        }
        out
    }

    pub fn log_text(&self) -> String {
        let mut out = self.lines.join("\n");
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn plants_the_requested_share() {
        let c = generate(&SyntheticSpec::new(System::A, 200, 1)).unwrap();
        assert_eq!(c.lines.len(), 4000);
        let sys = c.to_system(&ParserConfig::default()).unwrap();
        assert_eq!(sys.windows.len(), 200);
        assert_eq!(sys.windows.iter().filter(|w| w.label.is_anomalous()).count(), 10);
        for (line, label) in c.lines.iter().zip(&c.labels) {
            let rare = line.contains("fatal") || line.contains("panic");
            assert_eq!(rare, label.is_anomalous(), "{line}");
        }
    }

    #[test]
    fn mining_recovers_the_message_types() {
        let c = generate(&SyntheticSpec::new(System::A, 300, 2)).unwrap();
        let sys = c.to_system(&ParserConfig::default()).unwrap();
        // twelve normal types plus three anomaly types
        assert_eq!(sys.store.len(), 15, "{}", sys.store.to_text());
    }

    #[test]
    fn systems_share_half_their_vocabulary() {
        let tokens = |s: System| -> BTreeSet<String> {
            let c = generate(&SyntheticSpec::new(s, 300, 3)).unwrap();
            let sys = c.to_system(&ParserConfig::default()).unwrap();
            sys.store.iter().filter(|t| t.support_count > 0).map(|t| t.text()).collect()
        };
        let (a, b) = (tokens(System::A), tokens(System::B));
        assert_eq!(a.intersection(&b).count(), 6);
        let b_text = generate(&SyntheticSpec::new(System::B, 100, 3)).unwrap().log_text();
        assert!(!b_text.contains("fatal") && !b_text.contains("panic"));
        assert!(b_text.contains("critical"));
    }

    #[test]
    fn generation_is_seeded() {
        let s = SyntheticSpec::new(System::B, 50, 9);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        assert_ne!(generate(&s).unwrap(), generate(&SyntheticSpec { seed: 10, ..s }).unwrap());
    }
}
