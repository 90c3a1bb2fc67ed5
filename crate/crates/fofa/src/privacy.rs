//! Uplink privacy audit.
//!
//! A request passes when its declared schema carries no item or user
//! identifiers, its bytes parse as exactly that schema, and its length is
//! the fixed `header + 4·(2L + d_m)` whatever the device's history.

use fofa_core::assembly::{request_wire_len, REQUEST_HEADER_LEN};
use serde::{Deserialize, Serialize};

use crate::wire::{read_request_header, REQUEST_MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Magic,
    Version,
    /// Opaque routing handle chosen by the device, not a catalog or user id.
    RoutingId,
    Extent,
    FloatArray,
    ItemId,
    UserId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Field {
    pub name: &'static str,
    pub kind: FieldKind,
}

pub const REQUEST_SCHEMA: &[Field] = &[
    Field {
        name: "magic",
        kind: FieldKind::Magic,
    },
    Field {
        name: "version",
        kind: FieldKind::Version,
    },
    Field {
        name: "device",
        kind: FieldKind::RoutingId,
    },
    Field {
        name: "blocks",
        kind: FieldKind::Extent,
    },
    Field {
        name: "d_m",
        kind: FieldKind::Extent,
    },
    Field {
        name: "beta",
        kind: FieldKind::FloatArray,
    },
    Field {
        name: "h",
        kind: FieldKind::FloatArray,
    },
];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub pass: bool,
    pub findings: Vec<String>,
}

impl AuditReport {
    fn from_findings(findings: Vec<String>) -> Self {
        Self {
            pass: findings.is_empty(),
            findings,
        }
    }
}

pub fn audit_schema(schema: &[Field]) -> Vec<String> {
    schema
        .iter()
        .filter(|f| matches!(f.kind, FieldKind::ItemId | FieldKind::UserId))
        .map(|f| {
            format!(
                "schema field `{}` is an integer identifier ({:?})",
                f.name, f.kind
            )
        })
        .collect()
}

/// Audits one uplink message against a deployment of `n_blocks` and `d_m`.
pub fn privacy_audit(bytes: &[u8], n_blocks: usize, d_m: usize) -> AuditReport {
    let mut findings = audit_schema(REQUEST_SCHEMA);
    if bytes.len() < REQUEST_HEADER_LEN || bytes[..4] != REQUEST_MAGIC {
        findings.push("message is not a request frame".into());
        return AuditReport::from_findings(findings);
    }
    match read_request_header(bytes) {
        Ok(h) => {
            if (h.n_blocks, h.d_m) != (n_blocks, d_m) {
                findings.push(format!(
                    "declared extents ({}, {}) differ from the deployment ({n_blocks}, {d_m})",
                    h.n_blocks, h.d_m
                ));
            }
        }
        Err(e) => findings.push(format!("unreadable header: {e}")),
    }
    let expected = request_wire_len(n_blocks, d_m);
    if bytes.len() != expected {
        let extra = bytes.len() as i64 - expected as i64;
        findings.push(format!(
            "length {} is not the fixed {expected}: {extra:+} bytes outside the schema could carry raw interactions",
            bytes.len()
        ));
    }
    AuditReport::from_findings(findings)
}

/// Every message passes and all share one length.
pub fn audit_fleet<'a>(
    messages: impl IntoIterator<Item = &'a [u8]>,
    n_blocks: usize,
    d_m: usize,
) -> AuditReport {
    let mut findings = Vec::new();
    let mut len = None;
    for (i, m) in messages.into_iter().enumerate() {
        for f in privacy_audit(m, n_blocks, d_m).findings {
            findings.push(format!("message {i}: {f}"));
        }
        match len {
            None => len = Some(m.len()),
            Some(l) if l != m.len() => {
                findings.push(format!("message {i}: length {} differs from {l}", m.len()))
            }
            _ => {}
        }
    }
    findings.dedup();
    AuditReport::from_findings(findings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::encode_request;
    use fofa_core::assembly::{DeviceRequest, PROTOCOL_VERSION};
    use fofa_core::controller::StructureLogits;
    use fofa_core::mapper::LatentInterest;
    use fofa_core::Tensor;

    fn request() -> Vec<u8> {
        encode_request(&DeviceRequest {
            device_id: 5,
            version: PROTOCOL_VERSION,
            beta: StructureLogits::from_rows(&[[0.1, 0.2]; 3]),
            h: LatentInterest {
                h: Tensor::vector(vec![0.5; 8]),
            },
        })
    }

    #[test]
    fn well_formed_request_passes() {
        let r = privacy_audit(&request(), 3, 8);
        assert!(r.pass, "{:?}", r.findings);
    }

    #[test]
    fn appended_ids_fail() {
        let mut bytes = request();
        for id in [1193u32, 661, 914] {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        let r = privacy_audit(&bytes, 3, 8);
        assert!(!r.pass);
        assert!(r.findings[0].contains("+12 bytes"));
    }

    #[test]
    fn schema_with_id_field_fails() {
        let mut schema = REQUEST_SCHEMA.to_vec();
        schema.push(Field {
            name: "history",
            kind: FieldKind::ItemId,
        });
        assert_eq!(audit_schema(&schema).len(), 1);
        assert!(audit_schema(REQUEST_SCHEMA).is_empty());
    }

    #[test]
    fn fleet_of_equal_sizes_passes() {
        let a = request();
        let b = request();
        assert!(audit_fleet([&a[..], &b[..]], 3, 8).pass);
        let short = &a[..a.len() - 4];
        assert!(!audit_fleet([&a[..], short], 3, 8).pass);
    }
}
