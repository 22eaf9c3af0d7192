//! Buffer persistence.
//!
//! Binary layout (all integers and reals little-endian):
//!
//! ```text
//! "DVRB"            4 bytes magic
//! version           u8 (= 1)
//! m                 u32 state dimension
//! action kind       u8 (0 = discrete, 1 = continuous)
//! n_or_nactions     u32 (number of discrete actions, or continuous action width)
//! count             u64 number of records
//! count records:    m f64 state | u32 action id or n f64 | m f64 next_state | f64 reward | u8 terminal
//!
//! trailer:         u32 tag length | UTF-8 domain tag
//! ```
//!
//! The trailer keeps the domain tag through a save/load cycle without disturbing
//! the header and record layout.
//!
//! CSV export writes the header `x0..x{m-1},u,xp0..xp{m-1},r,e` for discrete
//! actions (`u0..u{n-1}` for continuous ones). CSV does not carry the domain tag.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Action, ActionSpec, BufferError, ReplayBuffer, Transition};

pub const BUFFER_MAGIC: &[u8; 4] = b"DVRB";
pub const BUFFER_FORMAT_VERSION: u8 = 1;

pub fn save(buffer: &ReplayBuffer, path: impl AsRef<Path>) -> Result<(), BufferError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(buffer, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ReplayBuffer, BufferError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_from(&bytes)
}

pub fn write_to(buffer: &ReplayBuffer, w: &mut impl Write) -> Result<(), BufferError> {
    let m = u32::try_from(buffer.state_dim).map_err(|_| BufferError::Dimension("state_dim exceeds u32".into()))?;
    w.write_all(BUFFER_MAGIC)?;
    w.write_all(&[BUFFER_FORMAT_VERSION])?;
    w.write_all(&m.to_le_bytes())?;
    let (kind, n) = match buffer.action_spec {
        ActionSpec::Discrete { n_actions } => (0u8, n_actions),
        ActionSpec::Continuous { dim } => (1u8, dim),
    };
    w.write_all(&[kind])?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&(buffer.transitions.len() as u64).to_le_bytes())?;

    for (i, t) in buffer.transitions.iter().enumerate() {
        if t.state.len() != buffer.state_dim || t.next_state.len() != buffer.state_dim {
            return Err(BufferError::Dimension(format!("row {i} does not match state_dim {}", buffer.state_dim)));
        }
        for x in &t.state {
            w.write_all(&x.to_le_bytes())?;
        }
        match (&t.action, buffer.action_spec) {
            (Action::Discrete(id), ActionSpec::Discrete { .. }) => w.write_all(&id.to_le_bytes())?,
            (Action::Continuous(v), ActionSpec::Continuous { dim }) if v.len() == dim as usize => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            _ => return Err(BufferError::Dimension(format!("row {i} action does not match the action spec"))),
        }
        for x in &t.next_state {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&t.reward.to_le_bytes())?;
        w.write_all(&[u8::from(t.terminal)])?;
    }
    let tag = buffer.domain_tag.as_bytes();
    w.write_all(&(tag.len() as u32).to_le_bytes())?;
    w.write_all(tag)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BufferError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(BufferError::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BufferError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, BufferError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BufferError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, BufferError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, BufferError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Parses a complete buffer image. Nothing is returned unless every record parses.
pub fn read_from(bytes: &[u8]) -> Result<ReplayBuffer, BufferError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if &magic != BUFFER_MAGIC {
        return Err(BufferError::BadMagic { found: magic });
    }
    let version = c.u8()?;
    if version != BUFFER_FORMAT_VERSION {
        return Err(BufferError::Version { found: version, expected: BUFFER_FORMAT_VERSION });
    }
    let m = c.u32()? as usize;
    if m == 0 {
        return Err(BufferError::Dimension("state_dim must be positive".into()));
    }
    let kind = c.u8()?;
    let n = c.u32()?;
    let action_spec = match kind {
        0 => ActionSpec::Discrete { n_actions: n },
        1 => ActionSpec::Continuous { dim: n },
        other => return Err(BufferError::Dimension(format!("unknown action kind {other}"))),
    };
    let count = c.u64()?;

    let action_bytes = match action_spec {
        ActionSpec::Discrete { .. } => 4,
        ActionSpec::Continuous { dim } => 8 * dim as usize,
    };
    let record = 16 * m + action_bytes + 9;
    let remaining = bytes.len() - c.pos;
    let expected = usize::try_from(count).ok().and_then(|k| k.checked_mul(record)).and_then(|e| e.checked_add(4));
    match expected {
        Some(e) if e <= remaining => {}
        Some(e) => {
            return Err(BufferError::Truncated { offset: c.pos, needed: e, available: remaining })
        }
        _ => {
            return Err(BufferError::Dimension(format!(
                "{count} records of {record} bytes do not fit the {remaining} payload bytes"
            )))
        }
    }

    let mut transitions = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let state = c.f64s(m)?;
        let action = match action_spec {
            ActionSpec::Discrete { n_actions } => {
                let id = c.u32()?;
                if id >= n_actions {
                    return Err(BufferError::Dimension(format!("row {i}: action id {id} outside [0, {n_actions})")));
                }
                Action::Discrete(id)
            }
            ActionSpec::Continuous { dim } => Action::Continuous(c.f64s(dim as usize)?),
        };
        let next_state = c.f64s(m)?;
        let reward = c.f64()?;
        let terminal = match c.u8()? {
            0 => false,
            1 => true,
            other => return Err(BufferError::Dimension(format!("row {i}: terminal byte {other} is not 0 or 1"))),
        };
        transitions.push(Transition { state, action, next_state, reward, terminal });
    }
    let tag_len = c.u32()? as usize;
    let domain_tag = String::from_utf8(c.take(tag_len)?.to_vec())
        .map_err(|_| BufferError::Dimension("domain tag is not valid UTF-8".into()))?;
    if c.pos != bytes.len() {
        return Err(BufferError::Dimension(format!("{} trailing bytes after the domain tag", bytes.len() - c.pos)));
    }
    Ok(ReplayBuffer { transitions, state_dim: m, action_spec, domain_tag })
}

fn csv_header(m: usize, spec: ActionSpec) -> Vec<String> {
    let mut h: Vec<String> = (0..m).map(|i| format!("x{i}")).collect();
    match spec {
        ActionSpec::Discrete { .. } => h.push("u".into()),
        ActionSpec::Continuous { dim } => h.extend((0..dim).map(|i| format!("u{i}"))),
    }
    h.extend((0..m).map(|i| format!("xp{i}")));
    h.push("r".into());
    h.push("e".into());
    h
}

pub fn export_csv(buffer: &ReplayBuffer, path: impl AsRef<Path>) -> Result<(), BufferError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(csv_header(buffer.state_dim, buffer.action_spec))?;
    let mut fields = Vec::new();
    for t in &buffer.transitions {
        fields.clear();
        fields.extend(t.state.iter().map(f64::to_string));
        match &t.action {
            Action::Discrete(id) => fields.push(id.to_string()),
            Action::Continuous(v) => fields.extend(v.iter().map(f64::to_string)),
        }
        fields.extend(t.next_state.iter().map(f64::to_string));
        fields.push(t.reward.to_string());
        fields.push(u8::from(t.terminal).to_string());
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV export. The state dimension and action layout are inferred from the
/// header; `n_actions` supplies the discrete action count, which CSV does not record.
pub fn import_csv(path: impl AsRef<Path>, n_actions: u32, domain_tag: &str) -> Result<ReplayBuffer, BufferError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let m = header.iter().filter(|h| h.starts_with('x') && !h.starts_with("xp")).count();
    let continuous = header.iter().filter(|h| h.starts_with('u') && h.len() > 1).count();
    let spec = if header.iter().any(|h| h == "u") {
        ActionSpec::Discrete { n_actions }
    } else {
        ActionSpec::Continuous { dim: continuous as u32 }
    };
    let expected = csv_header(m, spec);
    if m == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(BufferError::CsvFormat(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let a = spec.feature_width();
    let parse = |s: &str, line: usize| {
        s.trim().parse::<f64>().map_err(|e| BufferError::CsvFormat(format!("line {line}: {s:?}: {e}")))
    };
    let mut transitions = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals = rec.iter().map(|s| parse(s, line + 2)).collect::<Result<Vec<_>, _>>()?;
        let action = match spec {
            ActionSpec::Discrete { .. } => {
                let u = vals[m];
                if u < 0.0 || u.fract() != 0.0 || u >= f64::from(n_actions) {
                    return Err(BufferError::CsvFormat(format!("line {}: bad action id {u}", line + 2)));
                }
                Action::Discrete(u as u32)
            }
            ActionSpec::Continuous { .. } => Action::Continuous(vals[m..m + a].to_vec()),
        };
        transitions.push(Transition {
            state: vals[..m].to_vec(),
            action,
            next_state: vals[m + a..2 * m + a].to_vec(),
            reward: vals[2 * m + a],
            terminal: vals[2 * m + a + 1] != 0.0,
        });
    }
    Ok(ReplayBuffer { transitions, state_dim: m, action_spec: spec, domain_tag: domain_tag.to_owned() })
}
