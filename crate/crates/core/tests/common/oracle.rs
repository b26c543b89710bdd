//! Brute-force minimum edit-script search, independent of the DP aligner.
//!
//! Scripts are generated blindly left to right (keep, substitute, insert,
//! delete, swap-adjacent) and accepted only if replaying them on the source
//! reproduces the target. Pruning only discards steps that would write a
//! character disagreeing with the target, and scripts whose cost plus the
//! remaining length difference cannot beat the best found.

#[derive(Clone, Copy, Debug)]
enum Step {
    Keep,
    Put(char),
    Ins(char),
    Del,
    Swap,
}

fn cost(step: Step) -> u32 {
    match step {
        Step::Keep => 0,
        _ => 1,
    }
}

fn replay(src: &[char], script: &[Step]) -> Vec<char> {
    let mut out = Vec::new();
    let mut i = 0;
    for step in script {
        match *step {
            Step::Keep => {
                out.push(src[i]);
                i += 1;
            }
            Step::Put(c) => {
                out.push(c);
                i += 1;
            }
            Step::Ins(c) => out.push(c),
            Step::Del => i += 1,
            Step::Swap => {
                out.push(src[i + 1]);
                out.push(src[i]);
                i += 2;
            }
        }
    }
    assert_eq!(i, src.len(), "script must consume the whole source");
    out
}

struct Search<'a> {
    src: &'a [char],
    tgt: &'a [char],
    best: u32,
    script: Vec<Step>,
}

impl Search<'_> {
    /// `i` source characters consumed, `j` target characters produced so far
    /// (the produced prefix always equals `tgt[..j]`).
    fn dfs(&mut self, i: usize, j: usize, spent: u32) {
        let (src, tgt) = (self.src, self.tgt);
        // every remaining length difference costs at least one step per char
        let floor = (src.len() - i).abs_diff(tgt.len() - j) as u32;
        if spent + floor >= self.best {
            return;
        }
        if i == src.len() && j == tgt.len() {
            assert_eq!(replay(src, &self.script), tgt);
            self.best = spent;
            return;
        }
        let mut candidates: [Option<(Step, usize, usize)>; 5] = [None; 5];
        if i < src.len() {
            if j < tgt.len() && src[i] == tgt[j] {
                candidates[0] = Some((Step::Keep, i + 1, j + 1));
            }
            candidates[1] = Some((Step::Del, i + 1, j));
            if j < tgt.len() {
                candidates[2] = Some((Step::Put(tgt[j]), i + 1, j + 1));
            }
            if i + 1 < src.len() && j + 1 < tgt.len() && src[i + 1] == tgt[j] && src[i] == tgt[j + 1] {
                candidates[3] = Some((Step::Swap, i + 2, j + 2));
            }
        }
        if j < tgt.len() {
            candidates[4] = Some((Step::Ins(tgt[j]), i, j + 1));
        }
        for (step, ni, nj) in candidates.into_iter().flatten() {
            self.script.push(step);
            self.dfs(ni, nj, spent + cost(step));
            self.script.pop();
        }
    }
}

/// Minimum cost over all left-to-right edit scripts with unit costs and
/// adjacent swaps.
pub fn min_script_cost(src: &[char], tgt: &[char]) -> u32 {
    let mut search = Search {
        src,
        tgt,
        best: (src.len() + tgt.len()) as u32 + 1,
        script: Vec::new(),
    };
    search.dfs(0, 0, 0);
    search.best
}

/// All strings over `alphabet` with length in `1..=max_len`.
pub fn all_strings(alphabet: &[char], max_len: usize) -> Vec<Vec<char>> {
    let mut out: Vec<Vec<char>> = Vec::new();
    let mut layer: Vec<Vec<char>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(layer.len() * alphabet.len());
        for prefix in &layer {
            for &c in alphabet {
                let mut s = prefix.clone();
                s.push(c);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}
