use serde::{Deserialize, Serialize};

/// Sensor channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "V")]
    Visible,
    #[serde(rename = "T")]
    Thermal,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visible, Modality::Thermal];

    /// Position in the modality axis of sampling tensors.
    pub fn index(self) -> usize {
        match self {
            Modality::Visible => 0,
            Modality::Thermal => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visible => "V",
            Modality::Thermal => "T",
        }
    }
}

/// Decoder branch. Costs and loss tables are ordered V, F, T.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "V")]
    Visible,
    #[serde(rename = "F")]
    Fusion,
    #[serde(rename = "T")]
    Thermal,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Visible, Branch::Fusion, Branch::Thermal];

    pub fn index(self) -> usize {
        match self {
            Branch::Visible => 0,
            Branch::Fusion => 1,
            Branch::Thermal => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Visible => "V",
            Branch::Fusion => "F",
            Branch::Thermal => "T",
        }
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            Branch::Visible => Some(Modality::Visible),
            Branch::Fusion => None,
            Branch::Thermal => Some(Modality::Thermal),
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "V" | "VISIBLE" => Ok(Branch::Visible),
            "F" | "FUSION" => Ok(Branch::Fusion),
            "T" | "THERMAL" => Ok(Branch::Thermal),
            _ => Err(crate::Error::Config(format!("unknown branch {s:?}"))),
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}
