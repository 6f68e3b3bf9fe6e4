//! Transition storage: ring buffer, uniform sampling, prefix reveal, and the
//! binary dump format used for pseudo-online model probing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// One environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Flat column batch of transitions, reused across updates to keep the hot
/// path allocation-free.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub terminals: Vec<f64>,
    pub rows: usize,
}

impl Batch {
    pub fn clear(&mut self) {
        self.states.clear();
        self.actions.clear();
        self.rewards.clear();
        self.next_states.clear();
        self.terminals.clear();
        self.rows = 0;
    }
}

/// Ring buffer of transitions in struct-of-arrays layout.
///
/// `revealed_limit`, when set, restricts sampling and fitting to the first k
/// insertions (pseudo-online probing). The limit may only grow.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    d_s: usize,
    d_a: usize,
    capacity: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<f64>,
    /// Next slot to write.
    cursor: usize,
    /// Number of stored transitions (≤ capacity).
    len: usize,
    /// Total insertions ever made; detects wrap for reveal guards.
    total_pushed: usize,
    revealed_limit: Option<usize>,
}

impl ReplayBuffer {
    pub fn new(d_s: usize, d_a: usize, capacity: usize) -> Self {
        assert!(capacity >= 1, "replay capacity must be >= 1");
        Self {
            d_s,
            d_a,
            capacity,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            terminals: Vec::new(),
            cursor: 0,
            len: 0,
            total_pushed: 0,
            revealed_limit: None,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn state_dim(&self) -> usize {
        self.d_s
    }

    pub fn action_dim(&self) -> usize {
        self.d_a
    }

    /// Size visible to sampling and fitting: the revealed prefix when set,
    /// the full buffer otherwise.
    pub fn effective_len(&self) -> usize {
        self.revealed_limit.unwrap_or(self.len).min(self.len)
    }

    pub fn revealed_limit(&self) -> Option<usize> {
        self.revealed_limit
    }

    /// Stores a transition, overwriting the oldest when at capacity.
    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.state.len() != self.d_s || t.next_state.len() != self.d_s {
            return Err(Error::DimMismatch {
                what: "push state",
                expected: self.d_s,
                got: t.state.len(),
            });
        }
        if t.action.len() != self.d_a {
            return Err(Error::DimMismatch {
                what: "push action",
                expected: self.d_a,
                got: t.action.len(),
            });
        }
        if !t.reward.is_finite() {
            return Err(Error::NonFinite("transition reward".into()));
        }
        if self.len < self.capacity {
            self.states.extend_from_slice(&t.state);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.next_states.extend_from_slice(&t.next_state);
            self.terminals.push(if t.terminal { 1.0 } else { 0.0 });
            self.len += 1;
        } else {
            let i = self.cursor;
            self.states[i * self.d_s..(i + 1) * self.d_s].copy_from_slice(&t.state);
            self.actions[i * self.d_a..(i + 1) * self.d_a].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.next_states[i * self.d_s..(i + 1) * self.d_s].copy_from_slice(&t.next_state);
            self.terminals[i] = if t.terminal { 1.0 } else { 0.0 };
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.total_pushed += 1;
        Ok(())
    }

    /// `push` without constructing a `Transition`; the rollout hot path.
    pub fn push_raw(&mut self, s: &[f64], a: &[f64], r: f64, s2: &[f64], terminal: bool) {
        assert_eq!(s.len(), self.d_s);
        assert_eq!(a.len(), self.d_a);
        assert_eq!(s2.len(), self.d_s);
        let d = if terminal { 1.0 } else { 0.0 };
        if self.len < self.capacity {
            self.states.extend_from_slice(s);
            self.actions.extend_from_slice(a);
            self.rewards.push(r);
            self.next_states.extend_from_slice(s2);
            self.terminals.push(d);
            self.len += 1;
        } else {
            let i = self.cursor;
            self.states[i * self.d_s..(i + 1) * self.d_s].copy_from_slice(s);
            self.actions[i * self.d_a..(i + 1) * self.d_a].copy_from_slice(a);
            self.rewards[i] = r;
            self.next_states[i * self.d_s..(i + 1) * self.d_s].copy_from_slice(s2);
            self.terminals[i] = d;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.total_pushed += 1;
    }

    /// Slot index of the i-th surviving insertion (oldest first).
    fn slot_of(&self, i: usize) -> usize {
        if self.len < self.capacity {
            i
        } else {
            (self.cursor + i) % self.capacity
        }
    }

    pub fn get(&self, i: usize) -> Transition {
        assert!(i < self.len, "index out of range");
        let s = self.slot_of(i);
        Transition {
            state: self.states[s * self.d_s..(s + 1) * self.d_s].to_vec(),
            action: self.actions[s * self.d_a..(s + 1) * self.d_a].to_vec(),
            reward: self.rewards[s],
            next_state: self.next_states[s * self.d_s..(s + 1) * self.d_s].to_vec(),
            terminal: self.terminals[s] == 1.0,
        }
    }

    /// Restricts sampling and fitting to the first `k` insertions. `k` must
    /// not shrink and must stay within the stored size.
    pub fn reveal_prefix(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Replay("reveal_prefix needs k >= 1".into()));
        }
        if k > self.len {
            return Err(Error::Replay(format!(
                "reveal_prefix k={k} exceeds buffer size {}",
                self.len
            )));
        }
        if self.total_pushed > self.len {
            return Err(Error::Replay(
                "reveal_prefix on a wrapped buffer loses insertion order".into(),
            ));
        }
        if let Some(prev) = self.revealed_limit {
            if k < prev {
                return Err(Error::Replay(format!(
                    "reveal_prefix must be nondecreasing (had {prev}, got {k})"
                )));
            }
        }
        self.revealed_limit = Some(k);
        Ok(())
    }

    /// `n` uniform draws with replacement from the effective prefix.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        let m = self.effective_len();
        if m == 0 {
            return Err(Error::Empty("sample_batch on empty buffer"));
        }
        Ok((0..n).map(|_| self.get(rng.random_range(0..m))).collect())
    }

    /// Uniform sample written into a reusable flat [`Batch`].
    pub fn sample_into<R: Rng + ?Sized>(&self, n: usize, rng: &mut R, out: &mut Batch) {
        let m = self.effective_len();
        assert!(m > 0, "sample_into on empty buffer");
        out.clear();
        for _ in 0..n {
            let s = self.slot_of(rng.random_range(0..m));
            self.append_row(s, out);
        }
        out.rows = n;
    }

    pub(crate) fn append_row(&self, slot: usize, out: &mut Batch) {
        out.states
            .extend_from_slice(&self.states[slot * self.d_s..(slot + 1) * self.d_s]);
        out.actions
            .extend_from_slice(&self.actions[slot * self.d_a..(slot + 1) * self.d_a]);
        out.rewards.push(self.rewards[slot]);
        out.next_states
            .extend_from_slice(&self.next_states[slot * self.d_s..(slot + 1) * self.d_s]);
        out.terminals.push(self.terminals[slot]);
    }

    pub(crate) fn sample_slot<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let m = self.effective_len();
        debug_assert!(m > 0);
        self.slot_of(rng.random_range(0..m))
    }

    pub(crate) fn state_row(&self, slot: usize) -> &[f64] {
        &self.states[slot * self.d_s..(slot + 1) * self.d_s]
    }

    /// Copies the effective prefix into flat row-major design matrices:
    /// model inputs `[s | a]`, rewards, next states, and states.
    pub fn effective_matrices(
        &self,
        inputs: &mut Vec<f64>,
        rewards: &mut Vec<f64>,
        next_states: &mut Vec<f64>,
        states: &mut Vec<f64>,
    ) -> usize {
        let (d_s, d_a) = (self.d_s, self.d_a);
        let n = self.effective_len();
        inputs.clear();
        rewards.clear();
        next_states.clear();
        states.clear();
        inputs.reserve(n * (d_s + d_a));
        for i in 0..n {
            let s = self.slot_of(i);
            inputs.extend_from_slice(&self.states[s * d_s..(s + 1) * d_s]);
            inputs.extend_from_slice(&self.actions[s * d_a..(s + 1) * d_a]);
            rewards.push(self.rewards[s]);
            next_states.extend_from_slice(&self.next_states[s * d_s..(s + 1) * d_s]);
            states.extend_from_slice(&self.states[s * d_s..(s + 1) * d_s]);
        }
        n
    }

    /// Writes the full buffer (insertion order) in the dump format:
    /// ASCII header `FTFL-BUF v1 d_s=<n> d_a=<m> n=<rows>` then rows of
    /// little-endian f32 laid out `[s | a | r | s' | d]`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(
            w,
            "FTFL-BUF v1 d_s={} d_a={} n={}",
            self.d_s, self.d_a, self.len
        )?;
        fn put(w: &mut BufWriter<File>, v: f64) -> Result<()> {
            w.write_all(&(v as f32).to_le_bytes())?;
            Ok(())
        }
        for i in 0..self.len {
            let s = self.slot_of(i);
            for j in 0..self.d_s {
                put(&mut w, self.states[s * self.d_s + j])?;
            }
            for j in 0..self.d_a {
                put(&mut w, self.actions[s * self.d_a + j])?;
            }
            put(&mut w, self.rewards[s])?;
            for j in 0..self.d_s {
                put(&mut w, self.next_states[s * self.d_s + j])?;
            }
            put(&mut w, self.terminals[s])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a dump, validating the header and the record count.
    pub fn load(path: &Path) -> Result<ReplayBuffer> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte)
                .map_err(|_| Error::Dump("missing header line".into()))?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 256 {
                return Err(Error::Dump("header too long".into()));
            }
        }
        let header =
            String::from_utf8(header).map_err(|_| Error::Dump("non-ASCII header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "FTFL-BUF" || fields[1] != "v1" {
            return Err(Error::Dump(format!("bad header: {header:?}")));
        }
        let parse = |f: &str, key: &str| -> Result<usize> {
            f.strip_prefix(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Dump(format!("bad header field: {f:?}")))
        };
        let d_s = parse(fields[2], "d_s=")?;
        let d_a = parse(fields[3], "d_a=")?;
        let n = parse(fields[4], "n=")?;
        if d_s == 0 || d_a == 0 {
            return Err(Error::Dump("zero dims in header".into()));
        }

        let record = d_s + d_a + 1 + d_s + 1;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != n * record * 4 {
            return Err(Error::Dump(format!(
                "record count mismatch: header says {n} rows ({} bytes), found {} bytes",
                n * record * 4,
                body.len()
            )));
        }
        let mut buf = ReplayBuffer::new(d_s, d_a, n.max(1));
        let mut vals = Vec::with_capacity(record);
        for row in 0..n {
            vals.clear();
            for k in 0..record {
                let off = (row * record + k) * 4;
                let v = f32::from_le_bytes(body[off..off + 4].try_into().unwrap());
                vals.push(v as f64);
            }
            let d = vals[record - 1];
            if d != 0.0 && d != 1.0 {
                return Err(Error::Dump(format!("bad terminal flag {d} in row {row}")));
            }
            let t = Transition {
                state: vals[..d_s].to_vec(),
                action: vals[d_s..d_s + d_a].to_vec(),
                reward: vals[d_s + d_a],
                next_state: vals[d_s + d_a + 1..d_s + d_a + 1 + d_s].to_vec(),
                terminal: d == 1.0,
            };
            buf.push(&t)?;
        }
        Ok(buf)
    }
}
