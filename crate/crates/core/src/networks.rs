//! Two-mode networks linking CVEs to the participants who mentioned them and
//! to the domain names found next to them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{Debug, Display};
use std::io::Write;

use serde::Serialize;

use crate::cve::CveId;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("vertex {0} is not in the graph")]
    UnknownVertex(String),
}

/// Undirected, unweighted bipartite graph. Left and right vertices have
/// distinct types, so no edge can join two vertices of the same mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph<L: Ord, R: Ord> {
    left: BTreeMap<L, BTreeSet<R>>,
    right: BTreeMap<R, BTreeSet<L>>,
    edge_count: usize,
}

impl<L: Ord + Clone, R: Ord + Clone> Default for BipartiteGraph<L, R> {
    fn default() -> Self {
        BipartiteGraph {
            left: BTreeMap::new(),
            right: BTreeMap::new(),
            edge_count: 0,
        }
    }
}

impl<L, R> BipartiteGraph<L, R>
where
    L: Ord + Clone + Debug,
    R: Ord + Clone + Debug,
{
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the edge unless it already exists. Returns whether it was new.
    pub fn add_edge(&mut self, l: L, r: R) -> bool {
        let fresh = self.left.entry(l.clone()).or_default().insert(r.clone());
        if fresh {
            self.right.entry(r).or_default().insert(l);
            self.edge_count += 1;
        }
        fresh
    }

    pub fn left_vertices(&self) -> impl Iterator<Item = &L> {
        self.left.keys()
    }

    pub fn right_vertices(&self) -> impl Iterator<Item = &R> {
        self.right.keys()
    }

    pub fn left_count(&self) -> usize {
        self.left.len()
    }

    pub fn right_count(&self) -> usize {
        self.right.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn contains_right(&self, r: &R) -> bool {
        self.right.contains_key(r)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&L, &R)> {
        self.left
            .iter()
            .flat_map(|(l, rs)| rs.iter().map(move |r| (l, r)))
    }

    pub fn left_degree(&self, l: &L) -> Result<usize, NetworkError> {
        self.left
            .get(l)
            .map(BTreeSet::len)
            .ok_or_else(|| NetworkError::UnknownVertex(format!("{l:?}")))
    }

    pub fn right_degree(&self, r: &R) -> Result<usize, NetworkError> {
        self.right
            .get(r)
            .map(BTreeSet::len)
            .ok_or_else(|| NetworkError::UnknownVertex(format!("{r:?}")))
    }

    pub fn right_neighbors(&self, r: &R) -> Option<&BTreeSet<L>> {
        self.right.get(r)
    }

    pub fn left_neighbors(&self, l: &L) -> Option<&BTreeSet<R>> {
        self.left.get(l)
    }

    /// Checks that the edge count equals the degree sum of either mode.
    pub fn degree_sums_match(&self) -> bool {
        let left: usize = self.left.values().map(BTreeSet::len).sum();
        let right: usize = self.right.values().map(BTreeSet::len).sum();
        left == self.edge_count && right == self.edge_count
    }
}

impl<L, R> BipartiteGraph<L, R>
where
    L: Ord + Clone + Debug + Display,
    R: Ord + Clone + Debug + Display,
{
    /// Edge list as `vertex_type,left,right`, where `vertex_type` names the
    /// left mode.
    pub fn write_edges_csv<W: Write>(&self, left_type: &str, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["vertex_type", "left", "right"])?;
        for (l, r) in self.edges() {
            w.write_record([left_type, &l.to_string(), &r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Participant (by canonical name) to CVE network.
pub type SocialGraph = BipartiteGraph<String, CveId>;
/// Domain name to CVE network.
pub type DomainGraph = BipartiteGraph<String, CveId>;

/// Links each participant to every CVE appearing in one of their messages.
pub fn build_social_network<'a, I>(messages: I) -> SocialGraph
where
    I: IntoIterator<Item = (&'a str, &'a BTreeSet<CveId>)>,
{
    let mut g = SocialGraph::new();
    for (participant, cves) in messages {
        for cve in cves {
            g.add_edge(participant.to_string(), cve.clone());
        }
    }
    debug_assert!(g.degree_sums_match());
    g
}

/// Links each domain to every CVE that appears in the same message.
pub fn build_domain_network<'a, I>(messages: I) -> DomainGraph
where
    I: IntoIterator<Item = (&'a BTreeSet<CveId>, &'a BTreeSet<String>)>,
{
    let mut g = DomainGraph::new();
    for (cves, domains) in messages {
        for d in domains {
            for cve in cves {
                g.add_edge(d.clone(), cve.clone());
            }
        }
    }
    debug_assert!(g.degree_sums_match());
    g
}

/// Infrastructure categories of a CVE's domain neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct InfraFlags {
    pub vulninf: u8,
    pub bugs: u8,
    pub repos: u8,
    pub support: u8,
}

// Patterns ending in '.' match the start of a host; the others match a host
// equal to the pattern or ending in ".<pattern>".
const VULNINF: &[&str] = &["cert.", "exploit-db.com", "first.org", "mitre.org", "nist.gov", "osvdb.org"];
const BUGS: &[&str] = &["bugs.", "bugzilla.", "gnats.", "issues.", "jira.", "redmine.", "trac.", "tracker."];
const REPOS: &[&str] = &[
    "code.", "cvs.", "cvsweb.", "download.", "downloads.", "ftp.", "git.", "gitweb.", "hg.", "packages.", "svn.",
    "webcvs.", "websvn.",
];
const SUPPORT: &[&str] = &[
    "blog.", "blogs.", "dev.", "doc.", "docs.", "forum.", "forums.", "help.", "info.", "lists.", "support.", "wiki.",
];

fn host_matches(host: &str, pattern: &str) -> bool {
    if pattern.ends_with('.') {
        host.starts_with(pattern)
    } else {
        host == pattern
            || host
                .strip_suffix(pattern)
                .is_some_and(|head| head.ends_with('.'))
    }
}

fn any_match<'a>(domains: impl IntoIterator<Item = &'a String> + Clone, patterns: &[&str]) -> u8 {
    u8::from(
        domains
            .into_iter()
            .any(|d| patterns.iter().any(|p| host_matches(d, p))),
    )
}

pub fn classify_infrastructure<'a, I>(domains: I) -> InfraFlags
where
    I: IntoIterator<Item = &'a String> + Clone,
{
    InfraFlags {
        vulninf: any_match(domains.clone(), VULNINF),
        bugs: any_match(domains.clone(), BUGS),
        repos: any_match(domains.clone(), REPOS),
        support: any_match(domains, SUPPORT),
    }
}

/// 1 for CVEs adjacent to any of the named core participants.
///
/// Names missing from the graph are logged and otherwise ignored.
pub fn core_membership(social: &SocialGraph, core_names: &[String]) -> BTreeMap<CveId, u8> {
    let mut core_cves: BTreeSet<&CveId> = BTreeSet::new();
    for name in core_names {
        match social.left_neighbors(name) {
            Some(cves) => core_cves.extend(cves),
            None => log::warn!("core participant {name:?} not found among participants"),
        }
    }
    social
        .right_vertices()
        .map(|c| (c.clone(), u8::from(core_cves.contains(c))))
        .collect()
}
