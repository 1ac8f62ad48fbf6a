use crate::error::{Error, Result};

/// Frequency precision in bits; every row sums to `1 << PRECISION`.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

/// Cumulative frequencies of one symbol alphabet `offset..offset + n`, with an
/// optional trailing escape symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfRow {
    offset: i32,
    /// `cdf[0] = 0`, strictly increasing, `cdf[len - 1] = TOTAL`.
    cdf: Vec<u32>,
    escape: bool,
}

impl CdfRow {
    /// Builds a row from frequencies that already sum to [`TOTAL`].
    pub fn from_frequencies(offset: i32, freqs: &[u32], escape: bool) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::param("frequencies must be positive"));
        }
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        cdf.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            acc += u64::from(f);
            if acc > u64::from(TOTAL) {
                return Err(Error::param("frequencies exceed the total"));
            }
            cdf.push(acc as u32);
        }
        if acc != u64::from(TOTAL) {
            return Err(Error::param(format!(
                "frequencies sum to {acc}, expected {TOTAL}"
            )));
        }
        Ok(Self {
            offset,
            cdf,
            escape,
        })
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    /// Number of coded symbols including the escape.
    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Directly representable values (excludes the escape).
    pub fn value_count(&self) -> usize {
        self.len() - usize::from(self.escape)
    }

    pub fn frequency(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    pub fn escape_index(&self) -> Option<usize> {
        self.escape.then(|| self.len() - 1)
    }

    /// Alphabet index of `value`, or `None` when it needs the escape.
    pub fn index_of(&self, value: i32) -> Option<usize> {
        let i = i64::from(value) - i64::from(self.offset);
        (0..self.value_count() as i64)
            .contains(&i)
            .then_some(i as usize)
    }

    /// Symbol whose interval contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }

    /// Ideal cost in bits of coding `value` with this row.
    pub fn cost(&self, value: i32) -> f64 {
        let total = f64::from(TOTAL);
        match (self.index_of(value), self.escape_index()) {
            (Some(i), _) => -(f64::from(self.frequency(i)) / total).log2(),
            (None, Some(e)) => -(f64::from(self.frequency(e)) / total).log2() + 16.0,
            (None, None) => f64::INFINITY,
        }
    }
}

/// One row per channel (factorized model) or per scale level (Gaussian model).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub rows: Vec<CdfRow>,
}

impl CdfTable {
    pub fn row(&self, i: usize) -> Result<&CdfRow> {
        self.rows
            .get(i)
            .ok_or_else(|| Error::param(format!("table row {i} out of {}", self.rows.len())))
    }
}

/// Discretizes a probability mass function over `lo..=hi` (plus an escape
/// symbol carrying the leftover mass when `escape` is set) into integer
/// frequencies with total [`TOTAL`] and minimum frequency 1.
pub fn quantize_pmf(pmf: &[f64], escape: bool) -> Result<Vec<u32>> {
    let mut p: Vec<f64> = pmf
        .iter()
        .map(|&v| if v.is_finite() { v.max(0.0) } else { 0.0 })
        .collect();
    if escape {
        let mass: f64 = p.iter().sum();
        p.push((1.0 - mass).max(0.0));
    }
    let n = p.len();
    if n == 0 || n > TOTAL as usize {
        return Err(Error::param(format!(
            "alphabet of {n} symbols does not fit {PRECISION}-bit frequencies"
        )));
    }
    let sum: f64 = p.iter().sum();
    if sum <= 0.0 {
        return Err(Error::param("probability mass is zero"));
    }
    // Reserve one count per symbol, share the rest proportionally.
    let spare = f64::from(TOTAL) - n as f64;
    let mut f: Vec<u32> = p
        .iter()
        .map(|&v| 1 + (v / sum * spare).floor() as u32)
        .collect();
    let mut deficit = i64::from(TOTAL) - f.iter().map(|&v| i64::from(v)).sum::<i64>();
    // Hand the remaining counts to the symbols with the largest rounding loss.
    let mut order: Vec<usize> = (0..n).collect();
    let frac = |i: usize| p[i] / sum * spare - (p[i] / sum * spare).floor();
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let mut k = 0;
    while deficit > 0 {
        f[order[k % n]] += 1;
        deficit -= 1;
        k += 1;
    }
    Ok(f)
}

/// Builds one row per probability function over the integer range `lo..=hi`.
pub fn build_cdf<F>(rows: usize, lo: i32, hi: i32, escape: bool, pmf: F) -> Result<CdfTable>
where
    F: Fn(usize, i32) -> f64,
{
    if hi < lo {
        return Err(Error::param(format!("empty symbol range {lo}..={hi}")));
    }
    let rows = (0..rows)
        .map(|r| {
            let p: Vec<f64> = (lo..=hi).map(|v| pmf(r, v)).collect();
            CdfRow::from_frequencies(lo, &quantize_pmf(&p, escape)?, escape)
        })
        .collect::<Result<_>>()?;
    Ok(CdfTable { rows })
}
