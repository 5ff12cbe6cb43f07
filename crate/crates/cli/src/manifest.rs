use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use t1q_core::relaxometry::AcqParams;
use t1q_core::volume::nifti::{read_labels, read_volume};
use t1q_core::volume::{SparseLabelVolume, Volume3D};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub mprage: PathBuf,
    pub fgatir: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wm_mask: Option<PathBuf>,
}

/// Subject list with acquisition parameters. Relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subjects: Vec<SubjectEntry>,
    #[serde(default)]
    pub acquisition: AcqParams,
    #[serde(skip)]
    pub root: PathBuf,
}

pub struct SubjectData {
    pub mprage: Volume3D,
    pub fgatir: Volume3D,
    pub labels: SparseLabelVolume,
    pub wm_mask: Option<Volume3D>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("reading manifest {}: {e}", path.display())))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("manifest {}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.subjects.is_empty() {
            return Err(CliError::Data("manifest lists no subjects".into()));
        }
        self.acquisition
            .validate()
            .map_err(|e| CliError::Data(format!("manifest acquisition: {e}")))?;
        let mut seen = BTreeSet::new();
        for s in &self.subjects {
            if s.id.is_empty() || s.id.contains(['/', '\\']) {
                return Err(CliError::Data(format!(
                    "subject id {:?} must be non-empty without path separators",
                    s.id
                )));
            }
            if !seen.insert(&s.id) {
                return Err(CliError::Data(format!("duplicate subject id {:?} in manifest", s.id)));
            }
            let files = [Some(&s.mprage), Some(&s.fgatir), Some(&s.labels), s.wm_mask.as_ref()];
            for f in files.into_iter().flatten() {
                let p = self.resolve(f);
                if !p.is_file() {
                    return Err(CliError::Data(format!(
                        "subject {}: file {} does not exist",
                        s.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn load_subject(&self, s: &SubjectEntry) -> Result<SubjectData, CliError> {
        let vol = |p: &Path| read_volume(self.resolve(p)).map_err(|e| CliError::Data(format!("subject {}: {e}", s.id)));
        let mprage = vol(&s.mprage)?;
        let fgatir = vol(&s.fgatir)?;
        let labels =
            read_labels(self.resolve(&s.labels)).map_err(|e| CliError::Data(format!("subject {}: {e}", s.id)))?;
        let wm_mask = s.wm_mask.as_deref().map(vol).transpose()?;
        if mprage.dims() != fgatir.dims() || labels.dims() != mprage.dims() {
            return Err(CliError::Data(format!(
                "subject {}: MPRAGE, FGATIR and labels differ in size",
                s.id
            )));
        }
        Ok(SubjectData {
            mprage,
            fgatir,
            labels,
            wm_mask,
        })
    }
}
