//! Mining and modeling toolkit for CVE coordination delays.
//!
//! The crate follows the flow of the analysis: mailing-list messages are
//! parsed and cleaned ([`archive`]), CVE identifiers and hyperlink domains are
//! pulled out of the bodies ([`extraction`]), vulnerability-database records
//! are loaded ([`vulndb`]), two bipartite networks are built ([`networks`]),
//! per-CVE explanatory metrics are assembled into nested model matrices
//! ([`metrics`]), and the delays are modeled with OLS, quantile regression and
//! L1-penalized quantile regression ([`regress`]) plus a median-split
//! random-forest classification experiment ([`classify`]).

pub mod archive;
pub mod classify;
pub mod cve;
pub mod extraction;
pub mod metrics;
pub mod networks;
pub mod regress;
pub mod vulndb;

pub use cve::CveId;
