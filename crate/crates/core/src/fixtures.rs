//! Network fixtures shipped with the crate.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;

const FIXTURES: &[(&str, &str)] = &[
    ("pigou", include_str!("../fixtures/pigou.json")),
    ("diamond", include_str!("../fixtures/diamond.json")),
    ("small", include_str!("../fixtures/small.json")),
    ("steenbrink", include_str!("../fixtures/steenbrink.json")),
    ("nguyen-dupuis", include_str!("../fixtures/nguyen-dupuis.json")),
    ("sioux-falls", include_str!("../fixtures/sioux-falls.json")),
    ("regular-city-10x10", include_str!("../fixtures/regular-city-10x10.json")),
];

const ALIASES: &[(&str, &str)] = &[
    ("nguyen", "nguyen-dupuis"),
    ("steen", "steenbrink"),
    ("sioux", "sioux-falls"),
    ("regular", "regular-city-10x10"),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    FIXTURES.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Option<&'static str> {
    let name = ALIASES
        .iter()
        .find(|(alias, _)| *alias == name)
        .map_or(name, |(_, target)| *target);
    FIXTURES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Loads a built-in fixture by name (or alias).
pub fn load(name: &str) -> Result<Network> {
    let text = source(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown network fixture {name:?} (known: {})",
            names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    Network::from_json_str(text)
}

/// Resolves `name` as a file path when one exists, otherwise as a fixture name.
pub fn resolve(name: &str) -> Result<Network> {
    if Path::new(name).exists() {
        return Network::load(name);
    }
    if source(name).is_some() {
        return load(name);
    }
    Err(Error::io(
        name,
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "no such file and no built-in fixture with this name",
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routes::enumerate_routes;

    #[test]
    fn all_fixtures_validate() {
        for name in names() {
            let net = load(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            let k = net.route_bound().expect("fixtures carry a route bound");
            enumerate_routes(&net, k).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn fixture_sizes() {
        let cases = [
            ("small", 4, 9, 12, 30),
            ("steenbrink", 9, 36, 12, 1112),
            ("nguyen-dupuis", 13, 19, 4, 25),
        ];
        for (name, n, a, d, r) in cases {
            let net = load(name).unwrap();
            assert_eq!(net.num_nodes(), n, "{name}");
            assert_eq!(net.num_links(), a, "{name}");
            assert_eq!(net.num_od_pairs(), d, "{name}");
            let rs = enumerate_routes(&net, net.route_bound().unwrap()).unwrap();
            assert_eq!(rs.len(), r, "{name}");
        }
        let sioux = load("sioux").unwrap();
        assert_eq!((sioux.num_nodes(), sioux.num_links(), sioux.num_od_pairs()), (24, 76, 100));
        let regular = load("regular").unwrap();
        assert_eq!(
            (regular.num_nodes(), regular.num_links(), regular.num_od_pairs()),
            (100, 180, 30)
        );
    }
}
