//! Binary k-means: centers constrained to `{0,1}^d`, assignment by Hamming
//! argmin and update by per-bit majority vote over the members.
//!
//! Only a down-sample of the data is needed to obtain usable centers, so
//! [`train`] takes whatever sample it is given and never looks further.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tracing::debug;

use crate::bitcore::{hamming_words, Dataset};
use crate::codec::{read_file, to_u32, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CENTER_MAGIC: &[u8; 4] = b"BDK\x01";

/// Upper bound on training iterations.
pub const DEFAULT_MAX_ITERS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CenterSet {
    d_bits: usize,
    words: Vec<u64>,
    member_count: Vec<u64>,
}

impl CenterSet {
    pub fn new(d_bits: usize, words: Vec<u64>, member_count: Vec<u64>) -> Result<Self> {
        crate::bitcore::check_width(d_bits)?;
        let wpc = d_bits / 64;
        if member_count.is_empty() || words.len() != member_count.len() * wpc {
            return Err(Error::usage(format!(
                "center set needs m >= 1 codes with one count each; got {} words, {} counts",
                words.len(),
                member_count.len()
            )));
        }
        Ok(CenterSet {
            d_bits,
            words,
            member_count,
        })
    }

    pub fn m(&self) -> usize {
        self.member_count.len()
    }

    pub fn d_bits(&self) -> usize {
        self.d_bits
    }

    pub fn code(&self, j: usize) -> &[u64] {
        let w = self.d_bits / 64;
        &self.words[j * w..(j + 1) * w]
    }

    pub fn member_counts(&self) -> &[u64] {
        &self.member_count
    }

    /// Nearest center by Hamming distance; ties go to the lowest index.
    pub fn nearest(&self, code: &[u64]) -> (usize, u32) {
        let mut best = (0usize, u32::MAX);
        for j in 0..self.m() {
            let d = hamming_words(code, self.code(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(CENTER_MAGIC)
            .u32(to_u32(self.m(), "m")?)
            .u32(to_u32(self.d_bits, "d_bits")?)
            .words(&self.words);
        for &c in &self.member_count {
            w.u64(c);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "center file");
        r.expect_magic(CENTER_MAGIC)?;
        let m = r.u32()? as usize;
        let d_bits = r.u32()? as usize;
        if m == 0 || d_bits == 0 || d_bits % 64 != 0 {
            return Err(Error::format(format!(
                "center file: invalid shape m={m}, d_bits={d_bits}"
            )));
        }
        let m = r.count(m as u64, d_bits / 8 + 8)?;
        let mut words = Vec::with_capacity(m * d_bits / 64);
        r.words(m * d_bits / 64, &mut words)?;
        let member_count = (0..m).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        CenterSet::new(d_bits, words, member_count)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Center index per point, parallel to the dataset rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardAssignment(pub Vec<u32>);

impl HardAssignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn histogram(&self, m: usize) -> Vec<u64> {
        let mut h = vec![0u64; m];
        for &c in &self.0 {
            h[c as usize] += 1;
        }
        h
    }
}

/// Result of [`train`], with the objective recorded after every assignment.
#[derive(Debug, Clone)]
pub struct Training {
    pub centers: CenterSet,
    pub assignment: HardAssignment,
    /// `objectives[0]` is measured against the initial centers; entry `i`
    /// against the centers produced by update `i`.
    pub objectives: Vec<u64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Down-sample size used when none is configured: at least 100 expected
/// members per center, capped at a million points unless the data is smaller.
pub fn default_sample_size(n: usize, m: usize) -> usize {
    n.min((100 * m).max(1_000_000))
}

/// Uniform sample of `size` rows without replacement, kept in dataset order.
pub fn downsample(data: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    if size > data.len() {
        return Err(Error::usage(format!(
            "sample size {size} exceeds dataset size {}",
            data.len()
        )));
    }
    if size == data.len() {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, data.len(), size).into_vec();
    picks.sort_unstable();
    Ok(data.select(&picks))
}

pub fn init_centers(sample: &Dataset, m: usize, seed: u64) -> Result<CenterSet> {
    if m == 0 {
        return Err(Error::usage("m must be at least 1"));
    }
    if m > sample.len() {
        return Err(Error::usage(format!(
            "m = {m} exceeds sample size {}",
            sample.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, sample.len(), m);
    let mut words = Vec::with_capacity(m * sample.words_per_code());
    for p in picks.iter() {
        words.extend_from_slice(sample.code(p));
    }
    CenterSet::new(sample.d_bits(), words, vec![0; m])
}

pub fn assign_step(data: &Dataset, centers: &CenterSet) -> Result<HardAssignment> {
    if centers.m() == 0 {
        return Err(Error::usage("empty center set"));
    }
    if centers.d_bits() != data.d_bits() {
        return Err(Error::usage(format!(
            "center width {} does not match data width {}",
            centers.d_bits(),
            data.d_bits()
        )));
    }
    let wpc = data.words_per_code();
    let a = data
        .words()
        .par_chunks_exact(wpc)
        .map(|code| centers.nearest(code).0 as u32)
        .collect();
    Ok(HardAssignment(a))
}

/// Majority vote per bit over each center's members; an exact tie sets the
/// bit. Centers with no members keep their code from `previous`.
pub fn update_step(
    data: &Dataset,
    assignment: &HardAssignment,
    previous: &CenterSet,
) -> Result<CenterSet> {
    let m = previous.m();
    if assignment.len() != data.len() {
        return Err(Error::usage(format!(
            "assignment covers {} points, dataset has {}",
            assignment.len(),
            data.len()
        )));
    }
    if let Some(&bad) = assignment.0.iter().find(|&&c| c as usize >= m) {
        return Err(Error::usage(format!("assignment to center {bad} >= m = {m}")));
    }
    let wpc = data.words_per_code();
    let d_bits = data.d_bits();

    // counting sort of point indices by center
    let counts = assignment.histogram(m);
    let mut starts = vec![0usize; m + 1];
    for j in 0..m {
        starts[j + 1] = starts[j] + counts[j] as usize;
    }
    let mut members = vec![0usize; data.len()];
    let mut fill = starts.clone();
    for (i, &c) in assignment.0.iter().enumerate() {
        members[fill[c as usize]] = i;
        fill[c as usize] += 1;
    }

    let words: Vec<u64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|j| {
            let group = &members[starts[j]..starts[j + 1]];
            if group.is_empty() {
                return previous.code(j).to_vec();
            }
            let mut ones = vec![0u32; d_bits];
            for &i in group {
                for (w, &word) in data.code(i).iter().enumerate() {
                    let mut x = word;
                    while x != 0 {
                        let b = x.trailing_zeros() as usize;
                        ones[w * 64 + b] += 1;
                        x &= x - 1;
                    }
                }
            }
            let p = group.len() as u32;
            let mut code = vec![0u64; wpc];
            for (b, &c) in ones.iter().enumerate() {
                if 2 * c >= p {
                    code[b / 64] |= 1 << (b % 64);
                }
            }
            code
        })
        .collect();
    CenterSet::new(d_bits, words, counts)
}

/// Sum of Hamming distances between each point and its assigned center.
pub fn objective(data: &Dataset, assignment: &HardAssignment, centers: &CenterSet) -> u64 {
    data.words()
        .par_chunks_exact(data.words_per_code())
        .zip(assignment.0.par_iter())
        .map(|(code, &c)| hamming_words(code, centers.code(c as usize)) as u64)
        .sum()
}

pub fn train(sample: &Dataset, m: usize, max_iters: usize, seed: u64) -> Result<Training> {
    if max_iters == 0 {
        return Err(Error::usage("max_iters must be at least 1"));
    }
    let mut centers = init_centers(sample, m, seed)?;
    let mut assignment = assign_step(sample, &centers)?;
    let mut objectives = vec![objective(sample, &assignment, &centers)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        centers = update_step(sample, &assignment, &centers)?;
        let next = assign_step(sample, &centers)?;
        objectives.push(objective(sample, &next, &centers));
        debug!(iteration = iterations, objective = objectives[iterations], "bk-means");
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    let counts = assignment.histogram(m);
    let centers = CenterSet::new(centers.d_bits, centers.words, counts)?;
    Ok(Training {
        centers,
        assignment,
        objectives,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcore::{BitCode, Label};
    use rand::Rng;

    fn random_dataset(n: usize, d_bits: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = (0..n as u64).map(Label).collect();
        let words = (0..n * d_bits / 64).map(|_| rng.random()).collect();
        Dataset::new(d_bits, labels, words).unwrap()
    }

    /// Codes whose low bits spell out `patterns`; other bits zero.
    fn small_codes(patterns: &[&str]) -> Dataset {
        let records = patterns
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut c = BitCode::zeros(64).unwrap();
                for (b, ch) in p.chars().enumerate() {
                    c.set(b, ch == '1');
                }
                (Label(i as u64), c)
            })
            .collect();
        Dataset::from_codes(64, records).unwrap()
    }

    #[test]
    fn init_exhausts_and_is_deterministic() {
        let ds = random_dataset(20, 64, 1);
        let c = init_centers(&ds, 20, 5).unwrap();
        let mut got: Vec<u64> = (0..20).map(|j| c.code(j)[0]).collect();
        let mut want: Vec<u64> = ds.words().to_vec();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
        assert_eq!(init_centers(&ds, 7, 3).unwrap(), init_centers(&ds, 7, 3).unwrap());
        let one = init_centers(&ds, 1, 3).unwrap();
        assert!(ds.words().contains(&one.code(0)[0]));
        assert!(matches!(init_centers(&ds, 21, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn assign_exact_hit_and_tie_break() {
        let centers = small_codes(&["111", "1111", "1", "0000000111", "000111", "01"]);
        let cs = CenterSet::new(64, centers.words().to_vec(), vec![0; 6]).unwrap();
        let data = small_codes(&["0000000111"]);
        assert_eq!(assign_step(&data, &cs).unwrap().0, vec![3]);
        // the zero code is at distance 1 from centers 2 and 5, >= 3 from the rest
        let data = small_codes(&["0"]);
        assert_eq!(assign_step(&data, &cs).unwrap().0, vec![2]);
    }

    #[test]
    fn assign_matches_brute_force_argmin() {
        let ds = random_dataset(1000, 128, 2);
        let cs = init_centers(&random_dataset(100, 128, 3), 16, 4).unwrap();
        let a = assign_step(&ds, &cs).unwrap();
        for i in 0..ds.len() {
            let mut best = 0;
            let mut best_d = u32::MAX;
            for j in 0..16 {
                let mut d = 0;
                for b in 0..128 {
                    let x = ds.bitcode(i).get(b);
                    let y = (cs.code(j)[b / 64] >> (b % 64)) & 1 == 1;
                    d += (x != y) as u32;
                }
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(a.0[i] as usize, best);
        }
    }

    #[test]
    fn update_majority_examples() {
        let data = small_codes(&["101", "100", "001"]);
        let prev = CenterSet::new(64, vec![0], vec![0]).unwrap();
        let c = update_step(&data, &HardAssignment(vec![0, 0, 0]), &prev).unwrap();
        // column counts (2, 0, 2) of 3 members
        assert_eq!(c.code(0)[0], 0b101);
        assert_eq!(c.member_counts(), &[3]);

        let data = small_codes(&["10", "01"]);
        let c = update_step(&data, &HardAssignment(vec![0, 0]), &prev).unwrap();
        // exact ties in bits 0 and 1 both map to 1; remaining bits 0 of 2 -> 0
        assert_eq!(c.code(0)[0], 0b11);

        let data = small_codes(&["0110"]);
        let c = update_step(&data, &HardAssignment(vec![0]), &prev).unwrap();
        assert_eq!(c.code(0), data.code(0));
    }

    #[test]
    fn update_keeps_empty_centers() {
        let data = small_codes(&["1"]);
        let prev = CenterSet::new(64, vec![0, 42], vec![0, 0]).unwrap();
        let c = update_step(&data, &HardAssignment(vec![0]), &prev).unwrap();
        assert_eq!(c.code(1), &[42]);
        assert_eq!(c.member_counts(), &[1, 0]);
    }

    #[test]
    fn objective_cases() {
        let data = small_codes(&["11111", "0"]);
        let cs = CenterSet::new(64, data.words().to_vec(), vec![1, 1]).unwrap();
        assert_eq!(objective(&data, &HardAssignment(vec![0, 1]), &cs), 0);
        let zero = CenterSet::new(64, vec![0], vec![1]).unwrap();
        let one = small_codes(&["11111"]);
        assert_eq!(objective(&one, &HardAssignment(vec![0]), &zero), 5);

        let ds = random_dataset(300, 128, 8);
        let cs = init_centers(&ds, 9, 1).unwrap();
        let a = assign_step(&ds, &cs).unwrap();
        // literal double sum over r_ij * ||y_i - c_j||^2 on {0,1} vectors
        let mut lit = 0u64;
        for i in 0..ds.len() {
            for j in 0..cs.m() {
                let r = (a.0[i] as usize == j) as u64;
                let mut sq = 0u64;
                for b in 0..128 {
                    let y = ((ds.code(i)[b / 64] >> (b % 64)) & 1) as i64;
                    let c = ((cs.code(j)[b / 64] >> (b % 64)) & 1) as i64;
                    sq += ((y - c) * (y - c)) as u64;
                }
                lit += r * sq;
            }
        }
        assert_eq!(objective(&ds, &a, &cs), lit);
    }

    #[test]
    fn fixed_point_converges_in_one_iteration() {
        let data = small_codes(&["1111", "0000", "1100110011", "000000001111"]);
        let t = train(&data, 4, 10, 3).unwrap();
        assert_eq!(t.iterations, 1);
        assert!(t.converged);
        assert_eq!(t.objectives, vec![0, 0]);
    }

    #[test]
    fn objective_non_increasing_and_deterministic() {
        let ds = random_dataset(2000, 128, 9);
        let t = train(&ds, 32, 10, 1).unwrap();
        for w in t.objectives.windows(2) {
            assert!(w[1] <= w[0], "{:?}", t.objectives);
        }
        assert!(t.objectives[1] < t.objectives[0]);
        assert_eq!(t.centers.member_counts().iter().sum::<u64>(), 2000);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let t2 = pool.install(|| train(&ds, 32, 10, 1).unwrap());
        assert_eq!(t.centers, t2.centers);
        assert!(matches!(train(&ds, 4, 0, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn downsample_stays_inside_data() {
        let ds = random_dataset(500, 64, 4);
        let s = downsample(&ds, 100, 7).unwrap();
        assert_eq!(s.len(), 100);
        for (l, code) in s.iter() {
            assert_eq!(ds.code_of(l).unwrap(), code);
        }
        assert_eq!(s, downsample(&ds, 100, 7).unwrap());
        assert_eq!(default_sample_size(10, 8192), 10);
        assert_eq!(default_sample_size(50_000_000, 8192), 1_000_000);
        assert_eq!(default_sample_size(50_000_000, 20_000), 2_000_000);
    }

    #[test]
    fn center_file_round_trip() {
        let cs = CenterSet::new(128, vec![1, 2, 3, 4], vec![10, 0]).unwrap();
        let bytes = cs.to_bytes().unwrap();
        assert_eq!(CenterSet::from_bytes(&bytes).unwrap(), cs);
        assert!(matches!(
            CenterSet::from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Format(_))
        ));
    }
}
