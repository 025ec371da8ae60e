//! Synthetic workloads: Poisson arrivals and per-request accuracy labels over
//! the configuration lattice, plus the line-delimited trace file format.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::workflow::{ConfigSpace, Configuration, ModelIndex};

/// Largest lattice for which accuracy tables are generated.
pub const MAX_TABLE_SPACE: u64 = 1 << 16;

/// Lattices up to this size are stored as bitmaps in trace files.
pub const BITMAP_SPACE_LIMIT: u64 = 4096;

pub const MAX_VIOLATION_RATE: f64 = 0.1;

/// Ground-truth labels: for each request id, the configurations whose accuracy
/// matches `c*`. Request ids are dense, starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    n_agents: usize,
    n_models: usize,
    sets: Vec<Vec<Configuration>>,
}

impl AccuracyTable {
    /// Builds a table from explicit sets; each set is sorted and must contain `c*`.
    pub fn new(space: &ConfigSpace, sets: Vec<Vec<Configuration>>) -> Result<Self> {
        let mut normalized = Vec::with_capacity(sets.len());
        for (r, mut set) in sets.into_iter().enumerate() {
            for c in &set {
                space.validate(c)?;
            }
            set.sort();
            set.dedup();
            if set.binary_search(space.top()).is_err() {
                return Err(Error::validation(format!(
                    "accuracy set of request {r} does not contain the all-largest configuration"
                )));
            }
            normalized.push(set);
        }
        Ok(Self {
            n_agents: space.n_agents(),
            n_models: space.n_models(),
            sets: normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    /// Sorted accurate set of a request.
    pub fn accurate_set(&self, request: u64) -> &[Configuration] {
        &self.sets[request as usize]
    }

    pub fn is_accurate(&self, request: u64, c: &Configuration) -> bool {
        self.sets
            .get(request as usize)
            .is_some_and(|s| s.binary_search(c).is_ok())
    }

    pub fn sets(&self) -> &[Vec<Configuration>] {
        &self.sets
    }
}

/// A difficulty tier shapes how large a request's accurate set is.
///
/// With probability `base_prob` the whole lattice is accurate. Otherwise the
/// set is the up-closure of `generators` random non-base configurations whose
/// entries are drawn uniformly from `level_floor..M`, plus `c*`. A tier with no
/// generators and `base_prob = 0` yields `{c*}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTier {
    pub name: String,
    pub weight: f64,
    #[serde(default)]
    pub base_prob: f64,
    #[serde(default)]
    pub generators: usize,
    #[serde(default)]
    pub level_floor: ModelIndex,
}

impl DifficultyTier {
    pub fn easy(weight: f64, base_prob: f64) -> Self {
        Self {
            name: "easy".into(),
            weight,
            base_prob,
            generators: 2,
            level_floor: 0,
        }
    }

    pub fn medium(weight: f64) -> Self {
        Self {
            name: "medium".into(),
            weight,
            base_prob: 0.0,
            generators: 2,
            level_floor: 1,
        }
    }

    pub fn hard(weight: f64) -> Self {
        Self {
            name: "hard".into(),
            weight,
            base_prob: 0.0,
            generators: 0,
            level_floor: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableParams {
    pub tiers: Vec<DifficultyTier>,
    /// Target fraction of upgrade edges whose source is accurate and whose
    /// target is not.
    #[serde(default)]
    pub violation_rate: f64,
}

impl Default for TableParams {
    fn default() -> Self {
        Self {
            tiers: vec![
                DifficultyTier::easy(0.4, 0.25),
                DifficultyTier::medium(0.4),
                DifficultyTier::hard(0.2),
            ],
            violation_rate: 0.0,
        }
    }
}

impl TableParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_VIOLATION_RATE).contains(&self.violation_rate) {
            return Err(Error::validation(format!(
                "violation rate {} outside [0, {MAX_VIOLATION_RATE}]",
                self.violation_rate
            )));
        }
        if self.tiers.is_empty() {
            return Err(Error::validation("at least one difficulty tier is required"));
        }
        for t in &self.tiers {
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(Error::validation(format!("tier `{}`: weight must be >= 0", t.name)));
            }
            if !(0.0..=1.0).contains(&t.base_prob) {
                return Err(Error::validation(format!("tier `{}`: base_prob outside [0, 1]", t.name)));
            }
        }
        if self.tiers.iter().map(|t| t.weight).sum::<f64>() <= 0.0 {
            return Err(Error::validation("tier weights sum to zero"));
        }
        Ok(())
    }
}

/// Draws per-request accurate sets. Violations are injected against a running
/// target of `violation_rate * edges * requests_so_far`, so the table-wide
/// violated-edge fraction never exceeds the rate and tracks it closely when
/// requests have room to absorb violations.
pub fn generate_accuracy_table(
    space: &ConfigSpace,
    params: &TableParams,
    n_requests: usize,
    seed: u64,
) -> Result<AccuracyTable> {
    params.validate()?;
    let size = space
        .cardinality()
        .filter(|&s| s <= MAX_TABLE_SPACE)
        .ok_or_else(|| Error::validation("configuration space too large for table generation"))?;
    let all: Vec<Configuration> = space.iter().collect();
    debug_assert_eq!(all.len() as u64, size);
    let edges = space.upgrade_edge_count();
    let total_weight: f64 = params.tiers.iter().map(|t| t.weight).sum();

    let mut sets = Vec::with_capacity(n_requests);
    let mut injected = 0u64;
    for r in 0..n_requests {
        let mut rng = rng::stream(&[seed, rng::TAG_TABLE, r as u64]);
        let tier = pick_tier(&params.tiers, total_weight, &mut rng);
        let mut set = draw_upset(space, &all, tier, &mut rng);
        if params.violation_rate > 0.0 {
            let target = (params.violation_rate * edges as f64 * (r + 1) as f64).floor() as u64;
            let want = target.saturating_sub(injected);
            injected += inject_violations(space, &mut set, want, &mut rng);
        }
        let mut v: Vec<Configuration> = set.into_iter().collect();
        v.sort();
        sets.push(v);
    }
    Ok(AccuracyTable {
        n_agents: space.n_agents(),
        n_models: space.n_models(),
        sets,
    })
}

fn pick_tier<'a, R: Rng>(tiers: &'a [DifficultyTier], total: f64, rng: &mut R) -> &'a DifficultyTier {
    let mut x = rng.random::<f64>() * total;
    for t in tiers {
        if x < t.weight {
            return t;
        }
        x -= t.weight;
    }
    tiers.iter().rev().find(|t| t.weight > 0.0).expect("positive weight")
}

fn draw_upset<R: Rng>(
    space: &ConfigSpace,
    all: &[Configuration],
    tier: &DifficultyTier,
    rng: &mut R,
) -> HashSet<Configuration> {
    if tier.base_prob > 0.0 && rng.random::<f64>() < tier.base_prob {
        return all.iter().cloned().collect();
    }
    let m = space.n_models() as ModelIndex;
    let floor = tier.level_floor.min(m - 1);
    let base = space.base();
    let mut generators = Vec::with_capacity(tier.generators);
    while generators.len() < tier.generators {
        let g = Configuration::new(
            (0..space.n_agents()).map(|_| rng.random_range(floor..m)).collect(),
        );
        if g != base {
            generators.push(g);
        }
    }
    all.iter()
        .filter(|c| *c == space.top() || generators.iter().any(|g| g.is_below(c)))
        .cloned()
        .collect()
}

fn predecessors(c: &Configuration) -> impl Iterator<Item = Configuration> + '_ {
    (0..c.len()).filter(move |&a| c.model(a) > 0).map(move |a| {
        let mut v = c.models().to_vec();
        v[a] -= 1;
        Configuration::new(v)
    })
}

/// Deletes non-`c*` members, each chosen uniformly among those whose removal
/// adds between 1 and the remaining quota of violated edges. Returns the number
/// of violated edges created.
fn inject_violations<R: Rng>(
    space: &ConfigSpace,
    set: &mut HashSet<Configuration>,
    mut want: u64,
    rng: &mut R,
) -> u64 {
    let mut created = 0;
    while want > 0 {
        let mut members: Vec<&Configuration> = set.iter().filter(|c| *c != space.top()).collect();
        members.sort();
        let options: Vec<(Configuration, u64)> = members
            .into_iter()
            .filter_map(|y| {
                let gained = predecessors(y).filter(|p| set.contains(p)).count() as u64;
                let lost = space.successors(y).iter().filter(|s| !set.contains(*s)).count() as u64;
                let delta = gained.checked_sub(lost)?;
                (1..=want).contains(&delta).then(|| (y.clone(), delta))
            })
            .collect();
        if options.is_empty() {
            break;
        }
        let (victim, delta) = options[rng.random_range(0..options.len())].clone();
        set.remove(&victim);
        want -= delta;
        created += delta;
    }
    created
}

/// Upgrade edges `x -> y` with `x` accurate and `y` not.
pub fn violated_edges(space: &ConfigSpace, set: &[Configuration]) -> u64 {
    let members: HashSet<&Configuration> = set.iter().collect();
    set.iter()
        .map(|x| space.successors(x).iter().filter(|y| !members.contains(y)).count() as u64)
        .sum()
}

pub fn is_upward_closed(space: &ConfigSpace, set: &[Configuration]) -> bool {
    violated_edges(space, set) == 0
}

/// Homogeneous Poisson arrivals: i.i.d. exponential gaps with mean `1 / rate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalProcess {
    pub rate: f64,
    pub seed: u64,
}

impl ArrivalProcess {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::validation(format!("arrival rate must be positive, got {rate}")));
        }
        Ok(Self { rate, seed })
    }

    fn gaps(&self) -> impl Iterator<Item = f64> {
        let mut rng = rng::stream(&[self.seed, rng::TAG_ARRIVALS]);
        let exp = Exp::new(self.rate).expect("positive rate");
        std::iter::repeat_with(move || exp.sample(&mut rng))
    }

    /// The first `count` arrival instants.
    pub fn times(&self, count: usize) -> Vec<f64> {
        self.gaps()
            .scan(0.0, |t, g| {
                *t += g;
                Some(*t)
            })
            .take(count)
            .collect()
    }

    /// All arrival instants strictly before `duration`. A prefix of `times`.
    pub fn times_within(&self, duration: f64) -> Vec<f64> {
        self.gaps()
            .scan(0.0, |t, g| {
                *t += g;
                Some(*t)
            })
            .take_while(|&t| t < duration)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceLine {
    request: u64,
    arrival: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    accurate_bitmap: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    accurate: Option<Vec<Configuration>>,
}

/// Writes one JSON line per request. Sets are hex bitmaps over the
/// lexicographic enumeration (bit `i` of the big-endian bitstring set when the
/// configuration of rank `i` is accurate) for lattices up to
/// [`BITMAP_SPACE_LIMIT`], explicit lists otherwise.
pub fn write_trace<W: Write>(
    mut out: W,
    space: &ConfigSpace,
    arrivals: &[f64],
    table: &AccuracyTable,
) -> Result<()> {
    if arrivals.len() != table.len() {
        return Err(Error::validation("arrival and table lengths differ"));
    }
    let size = space.cardinality();
    for (r, &arrival) in arrivals.iter().enumerate() {
        let set = table.accurate_set(r as u64);
        let mut line = TraceLine {
            request: r as u64,
            arrival,
            accurate_bitmap: None,
            accurate: None,
        };
        match size {
            Some(s) if s <= BITMAP_SPACE_LIMIT => {
                line.accurate_bitmap = Some(encode_bitmap(set, s as usize, space.n_models()))
            }
            _ => line.accurate = Some(set.to_vec()),
        }
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R, space: &ConfigSpace) -> Result<(Vec<f64>, AccuracyTable)> {
    let mut arrivals = Vec::new();
    let mut sets = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("trace line {}: {e}", lineno + 1)))?;
        if rec.request != sets.len() as u64 {
            return Err(Error::Parse(format!(
                "trace line {}: expected request id {}, found {}",
                lineno + 1,
                sets.len(),
                rec.request
            )));
        }
        if arrivals.last().is_some_and(|&prev| rec.arrival < prev) || rec.arrival < 0.0 {
            return Err(Error::Parse(format!("trace line {}: arrivals must be nondecreasing", lineno + 1)));
        }
        let set = match (rec.accurate_bitmap, rec.accurate) {
            (Some(hex), None) => decode_bitmap(&hex, space)?,
            (None, Some(list)) => list,
            _ => {
                return Err(Error::Parse(format!(
                    "trace line {}: exactly one of accurate_bitmap / accurate is required",
                    lineno + 1
                )))
            }
        };
        arrivals.push(rec.arrival);
        sets.push(set);
    }
    Ok((arrivals, AccuracyTable::new(space, sets)?))
}

fn encode_bitmap(set: &[Configuration], size: usize, n_models: usize) -> String {
    let mut bytes = vec![0u8; size.div_ceil(8)];
    for c in set {
        let i = c.rank(n_models) as usize;
        bytes[i / 8] |= 0x80 >> (i % 8);
    }
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn decode_bitmap(hex: &str, space: &ConfigSpace) -> Result<Vec<Configuration>> {
    let size = space.cardinality().unwrap_or(u64::MAX);
    if size > BITMAP_SPACE_LIMIT || hex.len() != (size as usize).div_ceil(8) * 2 {
        return Err(Error::Parse(format!("bitmap of length {} does not match the lattice", hex.len())));
    }
    let mut set = Vec::new();
    for (byte_index, chunk) in hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).map_err(|e| Error::Parse(e.to_string()))?;
        let byte = u8::from_str_radix(s, 16).map_err(|e| Error::Parse(format!("bad bitmap: {e}")))?;
        for bit in 0..8 {
            let i = byte_index * 8 + bit;
            if byte & (0x80 >> bit) != 0 {
                if i as u64 >= size {
                    return Err(Error::Parse("bitmap has bits past the lattice size".into()));
                }
                set.push(Configuration::from_rank(i as u64, space.n_agents(), space.n_models()));
            }
        }
    }
    Ok(set)
}
