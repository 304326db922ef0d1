//! Wire-shaped request records flowing through the pipeline.
//!
//! Long-sequence requests carry the routing key both in the header
//! (`consistency-hash-key`) and as the user id in the body; the header copy
//! drives affinity routing, the body copy serves cache lookup and fallback.

use serde::{Deserialize, Serialize};

/// Pipeline stage a request belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PreInfer,
    Rank,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestHeader {
    #[serde(
        rename = "consistency-hash-key",
        skip_serializing_if = "Option::is_none",
        default
    )]
    pub consistency_hash_key: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestBody {
    pub user_id: String,
    pub stage: Stage,
    /// Candidate item ids; empty for pre-infer requests.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub items: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    pub header: RequestHeader,
    pub body: RequestBody,
}

impl Request {
    /// The auxiliary response-free pre-infer signal. Always keyed, never
    /// carries candidate items.
    pub fn pre_infer(user_id: impl Into<String>) -> Self {
        let user_id = user_id.into();
        Self {
            header: RequestHeader {
                consistency_hash_key: Some(user_id.clone()),
            },
            body: RequestBody {
                user_id,
                stage: Stage::PreInfer,
                items: Vec::new(),
            },
        }
    }

    /// A ranking request for an admitted long-sequence user.
    pub fn rank_keyed(user_id: impl Into<String>, items: Vec<u64>) -> Self {
        let user_id = user_id.into();
        Self {
            header: RequestHeader {
                consistency_hash_key: Some(user_id.clone()),
            },
            body: RequestBody {
                user_id,
                stage: Stage::Rank,
                items,
            },
        }
    }

    /// A ranking request served by the normal service (no affinity key).
    pub fn rank_plain(user_id: impl Into<String>, items: Vec<u64>) -> Self {
        Self {
            header: RequestHeader {
                consistency_hash_key: None,
            },
            body: RequestBody {
                user_id: user_id.into(),
                stage: Stage::Rank,
                items,
            },
        }
    }

    pub fn is_keyed(&self) -> bool {
        self.header.consistency_hash_key.is_some()
    }

    /// Structural invariants: a keyed request's header key matches the body
    /// user id, and pre-infer requests carry no items.
    pub fn is_well_formed(&self) -> bool {
        let key_ok = match &self.header.consistency_hash_key {
            Some(k) => *k == self.body.user_id,
            None => true,
        };
        let items_ok = self.body.stage != Stage::PreInfer || self.body.items.is_empty();
        key_ok && items_ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_infer_shape() {
        let req = Request::pre_infer("user-9");
        assert!(req.is_well_formed());
        assert!(req.is_keyed());
        assert!(req.body.items.is_empty());
        assert_eq!(req.body.stage, Stage::PreInfer);
    }

    #[test]
    fn json_rendering_uses_wire_names() {
        let req = Request::pre_infer("u42");
        let json = serde_json::to_string(&req).unwrap();
        assert!(json.contains("\"consistency-hash-key\":\"u42\""), "{json}");
        assert!(json.contains("\"stage\":\"pre-infer\""), "{json}");
        let back: Request = serde_json::from_str(&json).unwrap();
        assert!(back.is_well_formed());
    }

    #[test]
    fn mismatched_key_is_malformed() {
        let mut req = Request::rank_keyed("a", vec![1]);
        req.header.consistency_hash_key = Some("b".into());
        assert!(!req.is_well_formed());
    }
}
