use std::cmp::Ordering;

/// Owned key/value record, the unit that flows between stages.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KvRecord {
    pub key: u64,
    pub value: Vec<u8>,
}

impl KvRecord {
    pub fn new(key: u64, value: impl Into<Vec<u8>>) -> Self {
        KvRecord {
            key,
            value: value.into(),
        }
    }
}

/// Arena of records: one shared byte buffer plus a `(key, offset, len)`
/// index, so millions of small payloads cost no per-record allocation.
#[derive(Debug, Clone, Default)]
pub struct Records {
    index: Vec<(u64, u32, u32)>,
    data: Vec<u8>,
}

impl Records {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: u64, value: &[u8]) {
        let off = u32::try_from(self.data.len()).expect("record arena exceeds 4 GiB");
        self.data.extend_from_slice(value);
        self.index.push((key, off, value.len() as u32));
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Approximate resident size, used for spill decisions.
    pub fn footprint(&self) -> usize {
        self.data.len() + self.index.len() * 16
    }

    pub fn key(&self, i: usize) -> u64 {
        self.index[i].0
    }

    pub fn value(&self, i: usize) -> &[u8] {
        let (_, off, len) = self.index[i];
        &self.data[off as usize..off as usize + len as usize]
    }

    pub fn get(&self, i: usize) -> (u64, &[u8]) {
        (self.key(i), self.value(i))
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (u64, &[u8])> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn clear(&mut self) {
        self.index.clear();
        self.data.clear();
    }

    /// Sorts by key, then payload bytes.
    pub fn sort(&mut self) {
        let data = &self.data;
        let val = |&(_, off, len): &(u64, u32, u32)| &data[off as usize..(off + len) as usize];
        self.index.sort_unstable_by(|a, b| match a.0.cmp(&b.0) {
            Ordering::Equal => val(a).cmp(val(b)),
            o => o,
        });
    }

    pub fn to_vec(&self) -> Vec<KvRecord> {
        self.iter().map(|(k, v)| KvRecord::new(k, v)).collect()
    }

    pub fn extend_from(&mut self, other: &Records, range: std::ops::Range<usize>) {
        for i in range {
            let (k, v) = other.get(i);
            self.push(k, v);
        }
    }
}

impl FromIterator<KvRecord> for Records {
    fn from_iter<T: IntoIterator<Item = KvRecord>>(iter: T) -> Self {
        let mut r = Records::new();
        for rec in iter {
            r.push(rec.key, &rec.value);
        }
        r
    }
}

impl<'a> FromIterator<(u64, &'a [u8])> for Records {
    fn from_iter<T: IntoIterator<Item = (u64, &'a [u8])>>(iter: T) -> Self {
        let mut r = Records::new();
        for (k, v) in iter {
            r.push(k, v);
        }
        r
    }
}

impl PartialEq for Records {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.iter().eq(other.iter())
    }
}

impl Eq for Records {}

/// Sink handed to mappers and reducers.
#[derive(Debug, Default)]
pub struct Emitter {
    pub(crate) out: Records,
}

impl Emitter {
    pub fn emit(&mut self, key: u64, value: &[u8]) {
        self.out.push(key, value);
    }

    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }
}
