//! Deliberately naive recounts: quadratic scans, full DP tables, no hashing.

fn grams(s: &[u8], n: usize) -> Vec<&[u8]> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| &s[i..i + n]).collect()
}

fn occurrences(list: &[&[u8]], g: &[u8]) -> usize {
    list.iter().filter(|x| **x == g).count()
}

pub fn bleu4(c: &[Vec<u8>], r: &[Vec<u8>]) -> f64 {
    let mut logs = Vec::new();
    for n in 1..=4 {
        let (mut m, mut t) = (0usize, 0usize);
        for (cand, refr) in c.iter().zip(r) {
            let cg = grams(cand, n);
            let rg = grams(refr, n);
            let mut seen: Vec<&[u8]> = Vec::new();
            for g in &cg {
                t += 1;
                if !seen.contains(g) {
                    seen.push(g);
                    m += occurrences(&cg, g).min(occurrences(&rg, g));
                }
            }
        }
        if n == 1 && m == 0 {
            return 0.0;
        }
        logs.push(if m == 0 { 1.0 / (t as f64 + 1.0) } else { m as f64 / t as f64 });
    }
    let cl: usize = c.iter().map(Vec::len).sum();
    let rl: usize = r.iter().map(Vec::len).sum();
    let bp = if cl < rl { (1.0 - rl as f64 / cl as f64).exp() } else { 1.0 };
    let geo = logs.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
    100.0 * bp * geo.exp()
}

fn lcs(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l(c: &[Vec<u8>], r: &[Vec<u8>]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for (a, b) in c.iter().zip(r) {
        let l = lcs(a, b) as f64;
        if l > 0.0 {
            let p = l / a.len() as f64;
            let q = l / b.len() as f64;
            s += 2.0 * p * q / (p + q);
        }
    }
    100.0 * s / c.len() as f64
}

pub fn token_rep4(h: &[Vec<u8>]) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for x in h {
        let g = grams(x, 4);
        if g.is_empty() {
            continue;
        }
        let rep = (0..g.len()).filter(|&i| (0..i).any(|j| g[j] == g[i])).count();
        s += rep as f64 / g.len() as f64;
    }
    100.0 * s / h.len() as f64
}

pub fn sent_rep4(h: &[Vec<u8>], train: &[Vec<u8>]) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    let all: Vec<&[u8]> = train.iter().flat_map(|t| grams(t, 4)).collect();
    let mut s = 0.0;
    for x in h {
        let g = grams(x, 4);
        if g.is_empty() {
            continue;
        }
        let hits = g.iter().filter(|q| occurrences(&all, q) >= 2).count();
        s += hits as f64 / g.len() as f64;
    }
    100.0 * s / h.len() as f64
}

pub fn unique4(h: &[Vec<u8>]) -> usize {
    let mut all: Vec<Vec<u8>> = h.iter().flat_map(|x| grams(x, 4)).map(<[u8]>::to_vec).collect();
    all.sort();
    all.dedup();
    all.len()
}
