use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{
    parse_date, ClaimEvent, ClaimsError, ConceptCode, ConceptId, Domain, PatientId, PatientRecord,
    Race, Result, Sex, Vocabulary,
};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| ClaimsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Column positions resolved from a header row, so inputs may use any
/// column order.
struct Columns<const N: usize>([usize; N]);

impl<const N: usize> Columns<N> {
    fn resolve(headers: &csv::StringRecord, names: [&'static str; N]) -> Result<Self> {
        let mut idx = [0usize; N];
        for (slot, name) in idx.iter_mut().zip(names) {
            *slot = headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or(ClaimsError::MissingColumn(name))?;
        }
        Ok(Columns(idx))
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, i: usize, line: u64) -> Result<&'r str> {
        rec.get(self.0[i])
            .map(str::trim)
            .ok_or_else(|| ClaimsError::Row {
                line,
                message: "row has too few fields".into(),
            })
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn row_err(line: u64, message: impl Into<String>) -> ClaimsError {
    ClaimsError::Row {
        line,
        message: message.into(),
    }
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    read_vocabulary(open(path.as_ref())?)
}

pub fn read_vocabulary<R: Read>(r: R) -> Result<Vocabulary> {
    let mut rdr = reader(r);
    let cols = Columns::resolve(rdr.headers()?, ["concept_id", "domain", "description"])?;
    let mut vocab = Vocabulary::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let id: ConceptId = cols
            .get(&rec, 0, line)?
            .parse()
            .map_err(|e| row_err(line, e))?;
        let domain: Domain = cols
            .get(&rec, 1, line)?
            .parse()
            .map_err(|e| row_err(line, e))?;
        let description = cols.get(&rec, 2, line)?.to_string();
        vocab.insert(ConceptCode {
            id,
            domain,
            description,
        })?;
    }
    Ok(vocab)
}

pub fn write_vocabulary<W: Write>(vocab: &Vocabulary, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["concept_id", "domain", "description"])?;
    for c in vocab.iter() {
        wtr.write_record([
            c.id.to_string(),
            c.domain.to_string(),
            c.description.clone(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    UnknownConcept,
    DomainMismatch,
}

/// A syntactically valid claim row quarantined because it does not resolve
/// against the loaded vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: u64,
    pub patient_id: PatientId,
    pub concept_id: ConceptId,
    pub date: NaiveDate,
    pub reason: RejectionReason,
}

#[derive(Debug, Clone, Default)]
pub struct ClaimsLoad {
    /// One record per distinct patient id, ordered by id.
    pub records: Vec<PatientRecord>,
    pub rejections: Vec<Rejection>,
    pub rows_read: usize,
}

impl ClaimsLoad {
    pub fn accepted_events(&self) -> usize {
        self.records.iter().map(|r| r.events().len()).sum()
    }

    /// Fill in birth date, sex and race from a patients table. Patients that
    /// appear only in the demographics table get an empty history.
    pub fn attach_demographics(&mut self, table: &[Demographics]) {
        let mut by_id: BTreeMap<&PatientId, &Demographics> = BTreeMap::new();
        for d in table {
            by_id.insert(&d.patient_id, d);
        }
        let mut seen = std::collections::BTreeSet::new();
        for rec in &mut self.records {
            if let Some(d) = by_id.get(&rec.patient_id) {
                rec.set_demographics(d.birth_date, d.sex, d.race);
            }
            seen.insert(rec.patient_id.clone());
        }
        for d in table {
            if !seen.contains(&d.patient_id) {
                self.records.push(PatientRecord::new(
                    d.patient_id.clone(),
                    d.birth_date,
                    d.sex,
                    d.race,
                    Vec::new(),
                ));
            }
        }
        self.records.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    }
}

pub fn load_claims(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<ClaimsLoad> {
    read_claims(open(path.as_ref())?, vocab)
}

/// Reads the `patient_id,concept_id,domain,date` claims table. Malformed rows
/// are hard errors; rows whose concept is unknown (or whose domain disagrees
/// with the vocabulary) are quarantined in the rejection report.
pub fn read_claims<R: Read>(r: R, vocab: &Vocabulary) -> Result<ClaimsLoad> {
    let mut rdr = reader(r);
    if rdr.headers()?.is_empty() {
        return Ok(ClaimsLoad::default());
    }
    let cols = Columns::resolve(
        rdr.headers()?,
        ["patient_id", "concept_id", "domain", "date"],
    )?;
    let mut grouped: BTreeMap<PatientId, Vec<ClaimEvent>> = BTreeMap::new();
    let mut rejections = Vec::new();
    let mut rows_read = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        rows_read += 1;
        let pid = cols.get(&rec, 0, line)?;
        if pid.is_empty() {
            return Err(row_err(line, "empty patient_id"));
        }
        let patient_id = PatientId::new(pid);
        let concept_id: ConceptId = cols
            .get(&rec, 1, line)?
            .parse()
            .map_err(|e| row_err(line, e))?;
        let domain: Domain = cols
            .get(&rec, 2, line)?
            .parse()
            .map_err(|e| row_err(line, e))?;
        let date = parse_date(cols.get(&rec, 3, line)?).map_err(|e| row_err(line, e))?;
        let reason = match vocab.get(concept_id) {
            None => Some(RejectionReason::UnknownConcept),
            Some(c) if c.domain != domain => Some(RejectionReason::DomainMismatch),
            Some(_) => None,
        };
        let events = grouped.entry(patient_id.clone()).or_default();
        match reason {
            Some(reason) => rejections.push(Rejection {
                line,
                patient_id,
                concept_id,
                date,
                reason,
            }),
            None => events.push(ClaimEvent {
                patient_id,
                concept_id,
                date,
            }),
        }
    }
    let records = grouped
        .into_iter()
        .map(|(pid, events)| PatientRecord::new(pid, None, Sex::Unknown, Race::Unreported, events))
        .collect();
    Ok(ClaimsLoad {
        records,
        rejections,
        rows_read,
    })
}

/// Writes the canonical claims table: header order fixed, patients by id,
/// events by date.
pub fn write_claims<W: Write>(records: &[PatientRecord], vocab: &Vocabulary, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["patient_id", "concept_id", "domain", "date"])?;
    let mut order: Vec<&PatientRecord> = records.iter().collect();
    order.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    for rec in order {
        for e in rec.events() {
            let domain = vocab
                .get(e.concept_id)
                .map(|c| c.domain.as_str())
                .unwrap_or("observation");
            wtr.write_record([
                e.patient_id.as_str(),
                &e.concept_id.to_string(),
                domain,
                &e.date.to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub patient_id: PatientId,
    pub birth_date: Option<NaiveDate>,
    pub sex: Sex,
    pub race: Race,
}

pub fn load_patients(path: impl AsRef<Path>) -> Result<Vec<Demographics>> {
    read_patients(open(path.as_ref())?)
}

/// Reads `patient_id,birth_date,sex,race`. Blank race means unreported,
/// blank birth date means unknown.
pub fn read_patients<R: Read>(r: R) -> Result<Vec<Demographics>> {
    let mut rdr = reader(r);
    if rdr.headers()?.is_empty() {
        return Ok(Vec::new());
    }
    let cols = Columns::resolve(rdr.headers()?, ["patient_id", "birth_date", "sex", "race"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let pid = cols.get(&rec, 0, line)?;
        if pid.is_empty() {
            return Err(row_err(line, "empty patient_id"));
        }
        let birth = cols.get(&rec, 1, line)?;
        let birth_date = if birth.is_empty() {
            None
        } else {
            Some(parse_date(birth).map_err(|e| row_err(line, e))?)
        };
        let sex: Sex = cols
            .get(&rec, 2, line)?
            .parse()
            .map_err(|e| row_err(line, e))?;
        let race_s = cols.get(&rec, 3, line)?;
        let race = if race_s.is_empty() {
            Race::Unreported
        } else {
            race_s.parse().map_err(|e| row_err(line, e))?
        };
        out.push(Demographics {
            patient_id: PatientId::new(pid),
            birth_date,
            sex,
            race,
        });
    }
    Ok(out)
}

pub fn write_patients<W: Write>(records: &[PatientRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["patient_id", "birth_date", "sex", "race"])?;
    let mut order: Vec<&PatientRecord> = records.iter().collect();
    order.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    for r in order {
        wtr.write_record([
            r.patient_id.as_str(),
            &r.birth_date.map(|d| d.to_string()).unwrap_or_default(),
            r.sex.as_str(),
            r.race.as_str(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}
