use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use super::{ArchiveError, RawEmail};

pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// A resolved sender identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Participant {
    pub canonical_name: String,
    pub aliases: BTreeSet<String>,
    pub message_keys: BTreeSet<String>,
}

/// The participant partition together with an alias lookup.
#[derive(Debug, Clone, Default)]
pub struct Identities {
    /// Sorted by canonical name; the position is the participant id.
    pub participants: Vec<Participant>,
    by_alias: BTreeMap<String, usize>,
}

impl Identities {
    pub fn participant_of(&self, alias: &str) -> Option<usize> {
        self.by_alias.get(alias).copied()
    }

    pub fn canonical_of(&self, alias: &str) -> Option<&str> {
        self.participant_of(alias)
            .map(|i| self.participants[i].canonical_name.as_str())
    }

    pub fn find_canonical(&self, name: &str) -> Option<usize> {
        self.participants.iter().position(|p| p.canonical_name == name)
    }

    /// Records each message under its sender's participant.
    pub fn attach_messages(&mut self, emails: &[RawEmail]) {
        for email in emails {
            if let Some(i) = self.participant_of(&email.sender_raw) {
                self.participants[i]
                    .message_keys
                    .insert(email.message_key.clone());
            }
        }
    }
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Name similarity `1 - L(s1, s2) / max(l1, l2)` on case-folded, trimmed
/// names, where `L` is the Levenshtein distance in characters.
pub fn similarity(s1: &str, s2: &str) -> Result<f64, ArchiveError> {
    let (a, b) = (normalize(s1), normalize(s2));
    normalized_similarity(&a, &b)
}

fn normalized_similarity(a: &str, b: &str) -> Result<f64, ArchiveError> {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return Err(ArchiveError::EmptyNames);
    }
    Ok(1.0 - strsim::levenshtein(a, b) as f64 / longest as f64)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // smaller root wins so the structure does not depend on union order
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Groups sender names into participants.
///
/// Two names are linked when their similarity reaches `threshold`, and every
/// `manual_merges` pair is linked regardless of similarity; participants are
/// the connected components of these links. `names` is a multiset (one entry
/// per message); the canonical name of a participant is its most frequent
/// alias, ties going to the lexicographically smallest. The result does not
/// depend on the order of `names`.
pub fn resolve_identities(
    names: &[String],
    threshold: f64,
    manual_merges: &[(String, String)],
) -> Result<Identities, ArchiveError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ArchiveError::InvalidThreshold(threshold));
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for n in names {
        *counts.entry(n.as_str()).or_default() += 1;
    }
    let distinct: Vec<&str> = counts.keys().copied().collect();
    let normalized: Vec<String> = distinct.iter().map(|s| normalize(s)).collect();
    let m = distinct.len();

    let links: Vec<(usize, usize)> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let normalized = &normalized;
            (i + 1..m).filter_map(move |j| {
                let linked = normalized[i] == normalized[j]
                    || normalized_similarity(&normalized[i], &normalized[j])
                        .map(|d| d >= threshold)
                        .unwrap_or(false);
                linked.then_some((i, j))
            })
        })
        .collect();

    let mut uf = UnionFind::new(m);
    for (i, j) in links {
        uf.union(i, j);
    }
    for (a, b) in manual_merges {
        let (na, nb) = (normalize(a), normalize(b));
        let ia: Vec<usize> = (0..m).filter(|&i| normalized[i] == na).collect();
        let ib: Vec<usize> = (0..m).filter(|&i| normalized[i] == nb).collect();
        if ia.is_empty() || ib.is_empty() {
            log::warn!("manual merge ({a:?}, {b:?}) names a sender absent from the archive");
            continue;
        }
        for &x in ia.iter().chain(&ib) {
            uf.union(ia[0], x);
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..m {
        groups.entry(uf.find(i)).or_default().push(i);
    }

    let mut participants: Vec<Participant> = groups
        .into_values()
        .map(|members| {
            let canonical = members
                .iter()
                .map(|&i| (distinct[i], counts[distinct[i]]))
                .max_by(|(na, ca), (nb, cb)| ca.cmp(cb).then_with(|| nb.cmp(na)))
                .map(|(n, _)| n.to_string())
                .expect("groups are non-empty");
            Participant {
                canonical_name: canonical,
                aliases: members.iter().map(|&i| distinct[i].to_string()).collect(),
                message_keys: BTreeSet::new(),
            }
        })
        .collect();
    participants.sort_by(|a, b| {
        a.canonical_name
            .cmp(&b.canonical_name)
            .then_with(|| a.aliases.cmp(&b.aliases))
    });

    let mut by_alias = BTreeMap::new();
    for (i, p) in participants.iter().enumerate() {
        for alias in &p.aliases {
            by_alias.insert(alias.clone(), i);
        }
    }
    Ok(Identities {
        participants,
        by_alias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-matrix edit distance, kept independent of the library routine.
    fn edit_distance(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity("John Doe", "John Doe").unwrap(), 1.0);
        assert_eq!(edit_distance("john doe", "john, doe"), 1);
        let d = similarity("John Doe", "John, Doe").unwrap();
        assert!((d - (1.0 - 1.0 / 9.0)).abs() < 1e-15);
        assert!(d >= DEFAULT_THRESHOLD);
        assert_eq!(edit_distance("alice", "bob"), 5);
        assert_eq!(similarity("Alice", "Bob").unwrap(), 0.0);
    }

    #[test]
    fn similarity_of_two_empty_names_is_an_error() {
        assert!(matches!(similarity("  ", ""), Err(ArchiveError::EmptyNames)));
        assert_eq!(similarity("", "ab").unwrap(), 0.0);
    }

    #[test]
    fn normalization_ignores_case_and_padding() {
        assert_eq!(similarity(" JOHN doe", "john DOE ").unwrap(), 1.0);
    }

    #[test]
    fn near_duplicates_merge() {
        let ids = resolve_identities(&names(&["John Doe", "John, Doe", "Bob"]), 0.8, &[]).unwrap();
        assert_eq!(ids.participants.len(), 2);
        assert_eq!(ids.participant_of("John Doe"), ids.participant_of("John, Doe"));
    }

    #[test]
    fn manual_merge_links_reordered_names() {
        let input = names(&["Christey, Steven M.", "Steven M. Christey"]);
        let without = resolve_identities(&input, 0.8, &[]).unwrap();
        assert_eq!(without.participants.len(), 2);
        let merges = vec![("Christey, Steven M.".to_string(), "Steven M. Christey".to_string())];
        let with = resolve_identities(&input, 0.8, &merges).unwrap();
        assert_eq!(with.participants.len(), 1);
    }

    #[test]
    fn canonical_name_is_most_frequent_then_lexicographic() {
        let ids = resolve_identities(&names(&["John, Doe", "John Doe", "John Doe"]), 0.8, &[]).unwrap();
        assert_eq!(ids.participants[0].canonical_name, "John Doe");
        let ids = resolve_identities(&names(&["John, Doe", "John Doe"]), 0.8, &[]).unwrap();
        assert_eq!(ids.participants[0].canonical_name, "John Doe");
    }

    #[test]
    fn merging_is_transitive() {
        // abcde~abcdx and abcdx~abcyx are linked, abcde~abcyx is not
        assert!(similarity("abcde", "abcyx").unwrap() < 0.8);
        let ids = resolve_identities(&names(&["abcde", "abcdx", "abcyx"]), 0.8, &[]).unwrap();
        assert_eq!(ids.participants.len(), 1);
    }

    #[test]
    fn threshold_must_be_in_unit_interval() {
        assert!(resolve_identities(&[], 0.0, &[]).is_err());
        assert!(resolve_identities(&[], 1.5, &[]).is_err());
    }

    proptest! {
        #[test]
        fn distance_matches_oracle_and_is_symmetric(a in "[a-cA-C ,.]{0,8}", b in "[a-cA-C ,.]{0,7}[a-cA-C]") {
            let d = similarity(&a, &b).unwrap();
            let (na, nb) = (normalize(&a), normalize(&b));
            let longest = na.chars().count().max(nb.chars().count());
            if longest > 0 {
                let expected = 1.0 - edit_distance(&na, &nb) as f64 / longest as f64;
                prop_assert!((d - expected).abs() < 1e-12);
            }
            prop_assert_eq!(d, similarity(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d == 1.0, na == nb);
        }

        #[test]
        fn triangle_inequality(x in "[ab]{0,6}", y in "[ab]{0,6}", z in "[ab]{0,6}") {
            let l = |p: &str, q: &str| strsim::levenshtein(p, q);
            prop_assert!(l(&x, &z) <= l(&x, &y) + l(&y, &z));
        }

        #[test]
        fn partition_is_order_independent(
            mut input in proptest::collection::vec("(John Doe|John, Doe|Jon Doe|Bob|Bobby|Alice|alice )", 1..12),
            seed in any::<u64>(),
        ) {
            let base = resolve_identities(&input, 0.8, &[]).unwrap();
            // every name lands in exactly one participant
            let total: usize = base.participants.iter().map(|p| p.aliases.len()).sum();
            let distinct: BTreeSet<&String> = input.iter().collect();
            prop_assert_eq!(total, distinct.len());
            let mut s = seed;
            for i in (1..input.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                input.swap(i, (s >> 33) as usize % (i + 1));
            }
            let shuffled = resolve_identities(&input, 0.8, &[]).unwrap();
            prop_assert_eq!(base.participants, shuffled.participants);
        }
    }
}
