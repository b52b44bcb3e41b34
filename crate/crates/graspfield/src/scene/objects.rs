//! The prismatic object sets, loaded from the frozen vertex table shipped
//! with the crate.

use super::geometry::BasePolygon;
use super::ObjectSpec;
use crate::error::{Error, Result};
use serde::Deserialize;
use std::sync::OnceLock;

pub const OBJECT_TABLE_VERSION: u32 = 1;

const OBJECT_TABLE: &str = include_str!("../../data/object_sets.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectSetName {
    Single,
    MultiA,
    MultiB,
    MultiC,
}

impl ObjectSetName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "single" => Ok(ObjectSetName::Single),
            "multi_A" | "multi_a" => Ok(ObjectSetName::MultiA),
            "multi_B" | "multi_b" => Ok(ObjectSetName::MultiB),
            "multi_C" | "multi_c" => Ok(ObjectSetName::MultiC),
            other => Err(Error::UnknownObjectSet(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectSetName::Single => "single",
            ObjectSetName::MultiA => "multi_A",
            ObjectSetName::MultiB => "multi_B",
            ObjectSetName::MultiC => "multi_C",
        }
    }
}

pub fn object_set_names() -> [&'static str; 4] {
    ["single", "multi_A", "multi_B", "multi_C"]
}

#[derive(Deserialize)]
struct TableFile {
    version: u32,
    sets: TableSets,
}

#[derive(Deserialize)]
struct TableSets {
    single: Vec<TableObject>,
    #[serde(rename = "multi_A")]
    multi_a: Vec<TableObject>,
    #[serde(rename = "multi_B")]
    multi_b: Vec<TableObject>,
    #[serde(rename = "multi_C")]
    multi_c: Vec<TableObject>,
}

#[derive(Deserialize)]
struct TableObject {
    name: String,
    height: f64,
    color: [f32; 3],
    outer: Vec<[f64; 2]>,
    #[serde(default)]
    holes: Vec<Vec<[f64; 2]>>,
}

fn table() -> &'static TableFile {
    static TABLE: OnceLock<TableFile> = OnceLock::new();
    TABLE.get_or_init(|| {
        let t: TableFile = serde_json::from_str(OBJECT_TABLE).expect("object table parses");
        assert_eq!(t.version, OBJECT_TABLE_VERSION, "object table version drifted");
        t
    })
}

/// All object specs of a named set, in table order.
pub fn make_object_set(set: ObjectSetName) -> Result<Vec<ObjectSpec>> {
    let t = table();
    let raw = match set {
        ObjectSetName::Single => &t.sets.single,
        ObjectSetName::MultiA => &t.sets.multi_a,
        ObjectSetName::MultiB => &t.sets.multi_b,
        ObjectSetName::MultiC => &t.sets.multi_c,
    };
    raw.iter()
        .map(|o| {
            let spec = ObjectSpec {
                name: o.name.clone(),
                base: BasePolygon { outer: o.outer.clone(), holes: o.holes.clone() }.normalized(),
                height: o.height,
                color: o.color,
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_set_is_the_red_cross() {
        let set = make_object_set(ObjectSetName::Single).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].name, "red_cross");
        assert_eq!(set[0].height, 0.05);
    }

    #[test]
    fn multi_a_heights_match_the_task_definition() {
        let set = make_object_set(ObjectSetName::MultiA).unwrap();
        let heights: Vec<f64> = set.iter().map(|o| o.height).collect();
        assert_eq!(heights, vec![0.05, 0.07, 0.015, 0.03, 0.09]);
    }

    #[test]
    fn multi_b_heights_match_the_task_definition() {
        let set = make_object_set(ObjectSetName::MultiB).unwrap();
        let heights: Vec<f64> = set.iter().map(|o| o.height).collect();
        assert_eq!(heights, vec![0.05, 0.08, 0.02, 0.06, 0.03]);
    }

    #[test]
    fn multi_c_is_four_objects_with_a_ring() {
        let set = make_object_set(ObjectSetName::MultiC).unwrap();
        assert_eq!(set.len(), 4);
        let heights: Vec<f64> = set.iter().map(|o| o.height).collect();
        assert_eq!(heights, vec![0.04, 0.02, 0.07, 0.05]);
        let ring = &set[3];
        assert_eq!(ring.name, "purple_block_ring");
        assert_eq!(ring.base.holes.len(), 1);
        // 8 cm outer, 4 cm inner
        assert!((ring.base.area() - (0.08 * 0.08 - 0.04 * 0.04)).abs() < 1e-12);
    }

    #[test]
    fn every_object_passes_validation_and_fits_the_workspace() {
        for name in [
            ObjectSetName::Single,
            ObjectSetName::MultiA,
            ObjectSetName::MultiB,
            ObjectSetName::MultiC,
        ] {
            for spec in make_object_set(name).unwrap() {
                spec.validate().unwrap();
                assert!(spec.footprint_radius() < 0.1, "{} too large", spec.name);
                // bars must be wide enough for the 2 mm inset to stay sane
                let inset = spec.base.inset(super::super::TOP_INSET);
                assert!(inset.area() > 0.0, "{} inset collapsed", spec.name);
                assert!(inset.area() < spec.base.area(), "{} inset grew", spec.name);
            }
        }
    }

    #[test]
    fn unknown_set_name_is_an_error() {
        assert!(ObjectSetName::parse("multi_D").is_err());
    }
}
