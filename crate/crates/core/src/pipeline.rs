//! Descriptor extraction for each localization method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{ring_key_of, scancontext, ScanContextGrid};
use crate::data::{PolarImage, Traversal};
use crate::error::{ensure, Error, Result};
use crate::net::RadarLocModel;
use crate::retrieval::Descriptor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    RadarLoc,
    ScanContext,
    RingKey,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RadarLoc, Method::ScanContext, Method::RingKey];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::RadarLoc => "radarloc",
            Method::ScanContext => "scancontext",
            Method::RingKey => "ringkey",
        }
    }

    /// Method id stored with descriptors; ScanContext ids carry the grid.
    pub fn id(&self, grid: ScanContextGrid) -> String {
        match self {
            Method::ScanContext => format!("scancontext/{}x{}", grid.sectors, grid.rings),
            Method::RingKey => format!("ringkey/{}", grid.rings),
            Method::RadarLoc => self.as_str().to_string(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected radarloc, scancontext or ringkey)")))
    }
}

/// Descriptor vectors of `images` under `method`. RadarLoc requires a model.
pub fn describe_images(
    method: Method,
    images: &[&PolarImage],
    model: Option<&RadarLocModel<f32>>,
    grid: ScanContextGrid,
) -> Result<Vec<Vec<f32>>> {
    match method {
        Method::RadarLoc => {
            let model = model.ok_or_else(|| Error::Config("radarloc needs a checkpoint".into()))?;
            if images.is_empty() {
                return Ok(Vec::new());
            }
            let out = model.embed(&PolarImage::batch(images.iter().copied())?)?;
            Ok(out.data().chunks(out.shape()[1]).map(<[f32]>::to_vec).collect())
        }
        Method::ScanContext | Method::RingKey => {
            ensure!(model.is_none(), "{method} does not use a checkpoint");
            images
                .iter()
                .map(|img| {
                    let sc = scancontext(img, grid)?;
                    Ok(if method == Method::RingKey { ring_key_of(&sc) } else { sc.matrix })
                })
                .collect()
        }
    }
}

/// Geotagged descriptors for every reading of a traversal.
pub fn describe_traversal(
    method: Method,
    traversal: &Traversal,
    model: Option<&RadarLocModel<f32>>,
    grid: ScanContextGrid,
) -> Result<Vec<Descriptor>> {
    let images: Vec<&PolarImage> = traversal.images().collect();
    let vectors = describe_images(method, &images, model, grid)?;
    Ok(traversal
        .scans
        .iter()
        .zip(&traversal.poses)
        .zip(vectors)
        .map(|((scan, pose), values)| Descriptor {
            id: scan.id.clone(),
            pose: *pose,
            values,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("netvlad".parse::<Method>().is_err());
        let g = ScanContextGrid { sectors: 64, rings: 16 };
        assert_eq!(Method::ScanContext.id(g), "scancontext/64x16");
    }

    #[test]
    fn checkpoint_requirements() {
        let img = PolarImage::zeros(32, 16);
        let g = ScanContextGrid { sectors: 8, rings: 4 };
        assert!(describe_images(Method::RadarLoc, &[&img], None, g).is_err());
        let model = RadarLocModel::build(crate::net::NetworkConfig::with_input(32, 16), 1).unwrap();
        assert!(describe_images(Method::RingKey, &[&img], Some(&model), g).is_err());
        assert_eq!(describe_images(Method::RingKey, &[&img], None, g).unwrap()[0].len(), 4);
        assert_eq!(describe_images(Method::RadarLoc, &[&img], Some(&model), g).unwrap()[0].len(), 256);
    }
}
