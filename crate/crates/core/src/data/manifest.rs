use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ImageSource, Manifest, Quadrant, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 6] = ["image", "subject", "database", "label", "apex", "clip_len"];
/// Optional column naming the signal quadrant of synthetic samples.
pub const QUADRANT_COLUMN: &str = "quadrant";

fn optional_int(field: &str, name: &str, line: usize) -> Result<Option<usize>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::ManifestRow { row: line, message: format!("`{name}` is not a non-negative integer: {field:?}") })
}

/// Reads a manifest CSV. Image paths are resolved against the manifest's
/// directory; rows are reported by their line number in the file. The
/// [`QUADRANT_COLUMN`] is read when present.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut columns = HashMap::new();
    for name in MANIFEST_COLUMNS {
        let idx = headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        columns.insert(name, idx);
    }
    let quadrant_idx = headers.iter().position(|h| h == QUADRANT_COLUMN);

    let mut manifest = Manifest::default();
    let mut seen: HashMap<Vec<String>, usize> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let get = |name: &str| record.get(columns[name]).unwrap_or("");
        let key: Vec<String> = MANIFEST_COLUMNS.iter().map(|c| get(c).to_string()).collect();
        if let Some(&first) = seen.get(&key) {
            return Err(Error::DuplicateRow { row: line, first });
        }
        seen.insert(key, line);

        let subject = get("subject").to_string();
        if subject.is_empty() {
            return Err(Error::ManifestRow { row: line, message: "empty subject".into() });
        }
        let image = get("image");
        if image.is_empty() {
            return Err(Error::ManifestRow { row: line, message: "empty image path".into() });
        }
        let label = get("label").to_string();
        if label.is_empty() {
            return Err(Error::ManifestRow { row: line, message: "empty label".into() });
        }
        let apex = optional_int(get("apex"), "apex", line)?;
        let clip_len = optional_int(get("clip_len"), "clip_len", line)?;
        if clip_len == Some(0) {
            return Err(Error::ManifestRow { row: line, message: "clip_len must be positive".into() });
        }
        if let (Some(a), Some(n)) = (apex, clip_len) {
            if a >= n {
                return Err(Error::ManifestRow { row: line, message: format!("apex {a} is not below clip_len {n}") });
            }
        }
        let signal_quadrant = match quadrant_idx.and_then(|i| record.get(i)).unwrap_or("") {
            "" => None,
            q => Some(Quadrant::from_name(q).ok_or_else(|| Error::ManifestRow {
                row: line,
                message: format!("unknown quadrant {q:?}"),
            })?),
        };
        if !manifest.class_names.contains(&label) {
            manifest.class_names.push(label.clone());
        }
        manifest.samples.push(Sample {
            image: ImageSource::Path(base.join(image)),
            subject,
            database: get("database").to_string(),
            label,
            apex,
            clip_len,
            signal_quadrant,
        });
    }
    manifest.notes.push(format!("loaded from {}", path.display()));
    Ok(manifest)
}

impl Manifest {
    /// Writes the manifest CSV, using `image_names[i]` as the image column of
    /// sample `i`. The quadrant column is added when any sample has one.
    pub fn write_csv(&self, path: &Path, image_names: &[String]) -> Result<()> {
        if image_names.len() != self.samples.len() {
            return Err(Error::input("one image name per sample is required"));
        }
        let mut w = csv::Writer::from_path(path)?;
        let quadrants = self.samples.iter().any(|s| s.signal_quadrant.is_some());
        let mut header = MANIFEST_COLUMNS.to_vec();
        if quadrants {
            header.push(QUADRANT_COLUMN);
        }
        w.write_record(&header)?;
        for (s, name) in self.samples.iter().zip(image_names) {
            let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
            let mut row = vec![name.clone(), s.subject.clone(), s.database.clone(), s.label.clone(), opt(s.apex), opt(s.clip_len)];
            if quadrants {
                row.push(s.signal_quadrant.map_or("", Quadrant::name).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("manifest.csv");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "image,subject,database,label,apex,clip_len\n\
             a.ppm,s1,casme2,happiness,3,10\n\
             b.ppm,s2,samm,anger,,\n\
             c.ppm,s1,smic,surprise,,11\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.samples[0].apex, Some(3));
        assert_eq!(m.samples[1].apex, None);
        assert_eq!(m.samples[1].clip_len, None);
        assert_eq!(m.samples[2].clip_len, Some(11));
        assert_eq!(m.samples[2].database, "smic");
        assert_eq!(m.class_names, ["happiness", "anger", "surprise"]);
        assert_eq!(m.samples[0].image, ImageSource::Path(dir.path().join("a.ppm")));
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "image,database,label,apex,clip_len\na.ppm,x,y,,\n");
        match load_manifest(&p) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "subject"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn apex_beyond_clip_cites_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "image,subject,database,label,apex,clip_len\na.ppm,s1,d,x,1,5\nb.ppm,s1,d,x,5,5\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::ManifestRow { row: 3, .. })));
    }

    #[test]
    fn duplicates_and_unreadable_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "image,subject,database,label,apex,clip_len\na.ppm,s1,d,x,,\na.ppm,s1,d,x,,\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::DuplicateRow { row: 3, first: 2 })));

        let p = write(dir.path(), "image,subject,database,label,apex,clip_len\nmissing.ppm,s1,d,x,,\n");
        let m = load_manifest(&p).unwrap();
        assert!(matches!(m.validate_images(), Err(Error::Image { .. })));
    }

    #[test]
    fn quadrant_column_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "image,subject,database,label,apex,clip_len,quadrant\na.ppm,s1,d,x,,,top-right\nb.ppm,s2,d,x,,,\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.samples[0].signal_quadrant, Some(Quadrant::TopRight));
        assert_eq!(m.samples[1].signal_quadrant, None);
        let out = dir.path().join("out.csv");
        m.write_csv(&out, &["a.ppm".into(), "b.ppm".into()]).unwrap();
        let back = load_manifest(&out).unwrap();
        assert_eq!(back.samples, m.samples);

        let p = write(dir.path(), "image,subject,database,label,apex,clip_len,quadrant\na.ppm,s1,d,x,,,middle\n");
        assert!(matches!(load_manifest(&p), Err(Error::ManifestRow { row: 2, .. })));
    }
}
