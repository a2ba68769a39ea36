use std::path::Path;

use super::LoraAdapter;
use crate::backbone::Site;
use crate::error::{Error, Result};
use crate::store::{PackEntry, TensorPack};

/// An adapter with the bookkeeping needed to find it again on disk.
///
/// `key` is unique within a file; `owner` names the user or expert group the
/// adapter belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterRecord {
    pub key: String,
    pub stage: String,
    pub owner: Option<String>,
    pub adapter: LoraAdapter,
}

const B_SUFFIX: &str = ".lora_b";
const A_SUFFIX: &str = ".lora_a";

fn entry(name: String, r: &AdapterRecord, tensor: &crate::numerics::Tensor) -> PackEntry {
    let mut e = PackEntry::new(name, tensor.clone())
        .with("stage", &r.stage)
        .with("target", r.adapter.target)
        .with("r", r.adapter.rank)
        .with("alpha", r.adapter.alpha)
        .with("dropout", r.adapter.dropout);
    if let Some(owner) = &r.owner {
        e = e.with("owner", owner);
    }
    e
}

pub fn adapters_to_pack(records: &[AdapterRecord], pack: &mut TensorPack) {
    for r in records {
        pack.push(entry(format!("{}{B_SUFFIX}", r.key), r, &r.adapter.b));
        pack.push(entry(format!("{}{A_SUFFIX}", r.key), r, &r.adapter.a));
    }
}

/// Every adapter in `pack`, in file order. Entries that are not adapter
/// factors are ignored.
pub fn adapters_from_pack(pack: &TensorPack) -> Result<Vec<AdapterRecord>> {
    let mut out = Vec::new();
    for e in &pack.entries {
        let Some(key) = e.name.strip_suffix(B_SUFFIX) else {
            continue;
        };
        let a_name = format!("{key}{A_SUFFIX}");
        let a = pack.get(&a_name)?;
        let target_raw = e.attr("target")?;
        let target =
            Site::parse(target_raw).ok_or_else(|| Error::format(&e.name, format!("bad target `{target_raw}`")))?;
        let rank: usize = e.attr_parse("r")?;
        let (b_shape, a_shape) = (e.tensor.shape(), a.tensor.shape());
        if b_shape.len() != 2 || a_shape.len() != 2 || b_shape[1] != rank || a_shape[0] != rank {
            return Err(Error::format(
                &e.name,
                format!("factor shapes {b_shape:?} and {a_shape:?} disagree with rank {rank}"),
            ));
        }
        out.push(AdapterRecord {
            key: key.to_string(),
            stage: e.attr("stage")?.to_string(),
            owner: e.attrs.get("owner").cloned(),
            adapter: LoraAdapter {
                b: e.tensor.clone(),
                a: a.tensor.clone(),
                rank,
                alpha: e.attr_parse("alpha")?,
                dropout: e.attr_parse("dropout")?,
                target,
            },
        });
    }
    Ok(out)
}

pub fn save_adapters(base: &Path, records: &[AdapterRecord]) -> Result<()> {
    let mut pack = TensorPack::new();
    adapters_to_pack(records, &mut pack);
    pack.save(base)
}

pub fn load_adapters(base: &Path) -> Result<Vec<AdapterRecord>> {
    adapters_from_pack(&TensorPack::load(base)?)
}
