use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The eight functional building classes. Declaration order is the ordinal
/// order used for every probability vector and confusion-matrix axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildingClass {
    Apartment,
    Church,
    Garage,
    House,
    Industrial,
    OfficeBuilding,
    Retail,
    Roof,
}

pub const NUM_CLASSES: usize = 8;

impl BuildingClass {
    pub const ALL: [BuildingClass; NUM_CLASSES] = [
        BuildingClass::Apartment,
        BuildingClass::Church,
        BuildingClass::Garage,
        BuildingClass::House,
        BuildingClass::Industrial,
        BuildingClass::OfficeBuilding,
        BuildingClass::Retail,
        BuildingClass::Roof,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BuildingClass::Apartment => "apartment",
            BuildingClass::Church => "church",
            BuildingClass::Garage => "garage",
            BuildingClass::House => "house",
            BuildingClass::Industrial => "industrial",
            BuildingClass::OfficeBuilding => "office_building",
            BuildingClass::Retail => "retail",
            BuildingClass::Roof => "roof",
        }
    }

    /// Label names in ordinal order.
    pub fn labels() -> Vec<String> {
        Self::ALL.iter().map(|c| c.as_str().to_string()).collect()
    }
}

impl fmt::Display for BuildingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown building class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for BuildingClass {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownClass(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordinal_order_is_alphabetical() {
        let names = BuildingClass::labels();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        for (i, c) in BuildingClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(BuildingClass::from_index(i), Some(*c));
        }
    }

    #[test]
    fn serde_names_match_as_str() {
        for c in BuildingClass::ALL {
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(json, format!("\"{}\"", c.as_str()));
            assert_eq!(c.as_str().parse::<BuildingClass>().unwrap(), c);
        }
        assert!("office".parse::<BuildingClass>().is_err());
    }
}
