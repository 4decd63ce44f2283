use serde::{Deserialize, Serialize};

use crate::text::{lcs_alignment, mask_tokens, StopList, TokenSeq};

/// Keep/mask labels over a retrieved response and the resulting skeleton.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxySkeleton {
    pub labels: Vec<u8>,
    pub skeleton: TokenSeq,
}

/// Weak skeleton labels for the retrieved response `rr` given the gold response `r`.
///
/// Stop words are removed from both sides, the LCS of what remains is
/// aligned positionally, and a token of `rr` is kept exactly when it is an
/// aligned LCS element. A token repeated in `rr` but matched once is kept once.
pub fn make_proxy_skeleton(r: &[String], rr: &[String], stop: &StopList) -> ProxySkeleton {
    let gold: Vec<&String> = r.iter().filter(|t| !stop.contains(t)).collect();
    let (proto_pos, proto): (Vec<usize>, Vec<&String>) =
        rr.iter().enumerate().filter(|(_, t)| !stop.contains(t)).unzip();
    let mut labels = vec![0u8; rr.len()];
    for (_, j) in lcs_alignment(&gold, &proto) {
        labels[proto_pos[j]] = 1;
    }
    let skeleton = mask_tokens(rr, &labels).expect("labels cover rr");
    ProxySkeleton { labels, skeleton }
}
