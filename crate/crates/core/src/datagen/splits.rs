use super::{AttrValue, AttributeKind, AttributeSpec, Role, SplitConfig};

/// The three stock splits rotate attribute roles so that each attribute
/// appears both as shared and as domain-specific somewhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StockSplit {
    A,
    B,
    C,
}

impl std::str::FromStr for StockSplit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(StockSplit::A),
            "B" | "b" => Ok(StockSplit::B),
            "C" | "c" => Ok(StockSplit::C),
            other => Err(format!("unknown stock split `{other}` (expected A, B or C)")),
        }
    }
}

fn spec(name: &str, arity: usize, role: Role) -> AttributeSpec {
    AttributeSpec {
        name: name.into(),
        kind: AttributeKind::Categorical { arity },
        role,
    }
}

/// Build one of the stock Toy-A/B/C split configs.
///
/// Roles per split (specific_A / specific_B / rest shared):
///   Toy-A: bg_color / position
///   Toy-B: obj_color / size
///   Toy-C: shape / bg_color
pub fn stock_split(
    which: StockSplit,
    domain_sizes: (usize, usize),
    resolution: (usize, usize),
    seed: u64,
) -> SplitConfig {
    use Role::*;
    let (split_id, roles, fixed): (&str, [Role; 5], &[(&str, usize)]) = match which {
        // attribute order: bg_color, obj_color, shape, size, position
        StockSplit::A => (
            "toy-a",
            [SpecificA, Shared, Shared, Shared, SpecificB],
            &[("bg_color", 0), ("position", 2)],
        ),
        StockSplit::B => (
            "toy-b",
            [Shared, SpecificA, Shared, SpecificB, Shared],
            &[("obj_color", 0), ("size", 1)],
        ),
        StockSplit::C => (
            "toy-c",
            [SpecificB, Shared, SpecificA, Shared, Shared],
            &[("bg_color", 3), ("shape", 0)],
        ),
    };
    SplitConfig {
        split_id: split_id.into(),
        attributes: vec![
            spec("bg_color", 8, roles[0]),
            spec("obj_color", 8, roles[1]),
            spec("shape", 3, roles[2]),
            spec("size", 4, roles[3]),
            spec("position", 5, roles[4]),
        ],
        fixed_values: fixed
            .iter()
            .map(|(n, v)| (n.to_string(), AttrValue::Cat(*v)))
            .collect(),
        domain_sizes,
        resolution,
        seed,
    }
}

impl SplitConfig {
    /// Same attribute set with every role forced to shared (degenerate
    /// split used by tests).
    pub fn all_shared_variant(&self) -> SplitConfig {
        let mut cfg = self.clone();
        for spec in &mut cfg.attributes {
            spec.role = Role::Shared;
        }
        cfg.fixed_values.clear();
        cfg.split_id = format!("{}-all-shared", cfg.split_id);
        cfg
    }
}
