//! Method names: `<UPDATER>-<ACCESS>` for aggregated-gradient methods,
//! plus `LMC`, `SGLD` and the aliases `SAGA-LD` (= PPU-RA) and
//! `SVRG-LD` (= PTU-RA).

use agld::access::AccessKind;
use agld::sampler::Method;
use agld::snapshot::UpdaterKind;
use anyhow::{bail, Context, Result};

/// Canonical name of an updater/access pairing. A method without
/// snapshot updates is plain SGLD under that access pattern.
pub fn name_method(updater: UpdaterKind, access: AccessKind) -> String {
    method_name(&to_method(updater, access))
}

fn to_method(updater: UpdaterKind, access: AccessKind) -> Method {
    match updater {
        UpdaterKind::None => Method::Sgld { access },
        updater => Method::Agld { access, updater },
    }
}

pub fn method_name(method: &Method) -> String {
    method.to_string()
}

/// Parse a method name (case-insensitive).
pub fn parse_method(name: &str) -> Result<Method> {
    let upper = name.trim().to_ascii_uppercase();
    match upper.as_str() {
        "LMC" => return Ok(Method::Lmc),
        "SGLD" => return Ok(Method::Sgld { access: AccessKind::Random }),
        "SAGA-LD" => return Ok(to_method(UpdaterKind::Ppu, AccessKind::Random)),
        "SVRG-LD" => return Ok(to_method(UpdaterKind::Ptu, AccessKind::Random)),
        _ => {}
    }
    let Some((left, right)) = upper.split_once('-') else {
        bail!("unknown method {name:?}: expected LMC, SGLD, SAGA-LD, SVRG-LD or <PPU|PTU|TMU|NONE>-<RA|RR|CA>");
    };
    let access: AccessKind = right.parse().with_context(|| format!("in method {name:?}"))?;
    if left == "SGLD" {
        return Ok(Method::Sgld { access });
    }
    let updater: UpdaterKind = left.parse().with_context(|| format!("in method {name:?}"))?;
    Ok(to_method(updater, access))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_names() {
        assert_eq!(name_method(UpdaterKind::Tmu, AccessKind::Random), "TMU-RA");
        assert_eq!(name_method(UpdaterKind::Ppu, AccessKind::Cyclic), "PPU-CA");
        assert_eq!(name_method(UpdaterKind::None, AccessKind::Random), "SGLD");
        assert_eq!(name_method(UpdaterKind::None, AccessKind::Reshuffle), "SGLD-RR");
    }

    #[test]
    fn aliases_and_round_trips() {
        assert_eq!(parse_method("SAGA-LD").unwrap(), parse_method("PPU-RA").unwrap());
        assert_eq!(parse_method("svrg-ld").unwrap(), parse_method("PTU-RA").unwrap());
        assert_eq!(parse_method("NONE-RA").unwrap(), parse_method("SGLD").unwrap());
        for u in [UpdaterKind::Ppu, UpdaterKind::Ptu, UpdaterKind::Tmu, UpdaterKind::None] {
            for a in AccessKind::ALL {
                let name = name_method(u, a);
                assert_eq!(method_name(&parse_method(&name).unwrap()), name);
            }
        }
        assert_eq!(method_name(&parse_method("lmc").unwrap()), "LMC");
    }

    #[test]
    fn rejects_unknown_names() {
        for bad in ["XYZ-RA", "TMU-ZZ", "TMU", "", "SAGA"] {
            assert!(parse_method(bad).is_err(), "{bad}");
        }
    }
}
