use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::{validate_chain, Chain, ChainVerdict};
use crate::model::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct Majority {
    pub canonical: Chain,
    pub deviants: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MajorityError {
    #[error("no replicas supplied")]
    Empty,
    #[error("no chain is held by a strict majority of {replicas} replicas")]
    NoMajority { replicas: usize },
}

/// Content fingerprint of a replica. Two replicas agree only if every block
/// field matches, which also covers identity by tip hash and length.
pub fn fingerprint(chain: &Chain) -> String {
    let mut h = Sha256::new();
    h.update(chain.difficulty.to_le_bytes());
    for b in &chain.blocks {
        for field in [
            b.index.to_string().as_str(),
            b.timestamp_ms.to_string().as_str(),
            b.payload_b64.as_str(),
            b.prev_hash.as_str(),
            b.nonce.to_string().as_str(),
            b.hash.as_str(),
            b.pub_key_b64.as_str(),
            b.signature_b64.as_str(),
        ] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Picks the chain held by a strict majority of replicas, provided it also
/// validates; every holder of a different chain is a deviant.
pub fn resolve_majority<'a, I>(replicas: I) -> Result<Majority, MajorityError>
where
    I: IntoIterator<Item = (&'a NodeId, &'a Chain)>,
{
    let mut groups: BTreeMap<String, (Vec<&NodeId>, &Chain)> = BTreeMap::new();
    let mut total = 0usize;
    for (node, chain) in replicas {
        total += 1;
        groups
            .entry(fingerprint(chain))
            .or_insert_with(|| (Vec::new(), chain))
            .0
            .push(node);
    }
    if total == 0 {
        return Err(MajorityError::Empty);
    }
    let winner = groups
        .iter()
        .find(|(_, (holders, chain))| holders.len() * 2 > total && validate_chain(chain) == ChainVerdict::Ok);
    let Some((winner_fp, (_, chain))) = winner else {
        return Err(MajorityError::NoMajority { replicas: total });
    };
    let deviants = groups
        .iter()
        .filter(|(fp, _)| *fp != winner_fp)
        .flat_map(|(_, (holders, _))| holders.iter().map(|n| (*n).clone()))
        .collect();
    Ok(Majority {
        canonical: (*chain).clone(),
        deviants,
    })
}
