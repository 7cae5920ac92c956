//! Patient profiles, clinical notes, the synthetic population generator,
//! file ingestion, relevancy-based note selection and patient-level splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::tokenize;
use crate::matching::{field_occurrences, normalize_tokens};

pub const ISO_DATE: &str = "%Y-%m-%d";
pub const US_DATE: &str = "%m/%d/%Y";
pub const ISO_DATETIME: &str = "%Y-%m-%d %H:%M:%S";
pub const US_DATETIME: &str = "%m/%d/%Y %H:%M:%S";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("n_patients must be at least 1")]
    NoPatients,
    #[error("notes_per_patient must be at least 1")]
    NoNotes,
    #[error("presence probability for {field} is {value}, expected a value in [0, 1]")]
    BadPresence { field: FieldName, value: f64 },
    #[error("row {row}: field `{field}`: {message}")]
    Row { row: usize, field: String, message: String },
    #[error("duplicate patient_id `{0}`")]
    DuplicatePatient(String),
    #[error("duplicate note_id `{0}`")]
    DuplicateNote(String),
    #[error("note `{note_id}` references unknown patient_id `{patient_id}`")]
    UnknownPatient { note_id: String, patient_id: String },
    #[error("patient `{0}` has no notes")]
    PatientWithoutNotes(String),
    #[error("invalid profile `{patient_id}`: {message}")]
    InvalidProfile { patient_id: String, message: String },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("cannot split {patients} patients into {splits} splits")]
    TooFewPatients { patients: usize, splits: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The fourteen identifier fields of a patient profile, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldName {
    NoteDatetime,
    NoteClass,
    Mrn,
    Gender,
    DateOfBirth,
    Race,
    Ethnicity,
    DeathDate,
    DeathDatetime,
    Address1,
    Address2,
    City,
    State,
    Zip,
}

impl FieldName {
    pub const ALL: [FieldName; 14] = [
        FieldName::NoteDatetime,
        FieldName::NoteClass,
        FieldName::Mrn,
        FieldName::Gender,
        FieldName::DateOfBirth,
        FieldName::Race,
        FieldName::Ethnicity,
        FieldName::DeathDate,
        FieldName::DeathDatetime,
        FieldName::Address1,
        FieldName::Address2,
        FieldName::City,
        FieldName::State,
        FieldName::Zip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FieldName::NoteDatetime => "note_datetime",
            FieldName::NoteClass => "note_class",
            FieldName::Mrn => "mrn",
            FieldName::Gender => "gender",
            FieldName::DateOfBirth => "date_of_birth",
            FieldName::Race => "race",
            FieldName::Ethnicity => "ethnicity",
            FieldName::DeathDate => "death_date",
            FieldName::DeathDatetime => "death_datetime",
            FieldName::Address1 => "address_1",
            FieldName::Address2 => "address_2",
            FieldName::City => "city",
            FieldName::State => "state",
            FieldName::Zip => "zip",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for FieldName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FieldName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldName::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown profile field `{s}`"))
    }
}

/// Structured demographic record used as the reidentification target.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatientProfile {
    pub patient_id: String,
    pub note_datetime: Option<NaiveDateTime>,
    pub note_class: Option<String>,
    pub mrn: Option<String>,
    pub gender: Option<String>,
    pub date_of_birth: Option<NaiveDate>,
    pub race: Option<String>,
    pub ethnicity: Option<String>,
    pub death_date: Option<NaiveDate>,
    pub death_datetime: Option<NaiveDateTime>,
    pub address_1: Option<String>,
    pub address_2: Option<String>,
    pub city: Option<String>,
    pub state: Option<String>,
    pub zip: Option<String>,
}

fn is_zip(s: &str) -> bool {
    let b = s.as_bytes();
    let digits = |r: &[u8]| r.iter().all(u8::is_ascii_digit);
    match b.len() {
        5 => digits(b),
        10 => digits(&b[..5]) && b[5] == b'-' && digits(&b[6..]),
        _ => false,
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, ISO_DATE)
        .or_else(|_| NaiveDate::parse_from_str(s, US_DATE))
        .ok()
}

fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, ISO_DATETIME)
        .or_else(|_| NaiveDateTime::parse_from_str(s, US_DATETIME))
        .ok()
}

impl PatientProfile {
    pub fn new(patient_id: impl Into<String>) -> Self {
        Self { patient_id: patient_id.into(), ..Default::default() }
    }

    /// Canonical rendering of a field value, `None` when absent.
    pub fn field_value(&self, field: FieldName) -> Option<String> {
        match field {
            FieldName::NoteDatetime => self.note_datetime.map(|d| d.format(ISO_DATETIME).to_string()),
            FieldName::NoteClass => self.note_class.clone(),
            FieldName::Mrn => self.mrn.clone(),
            FieldName::Gender => self.gender.clone(),
            FieldName::DateOfBirth => self.date_of_birth.map(|d| d.format(ISO_DATE).to_string()),
            FieldName::Race => self.race.clone(),
            FieldName::Ethnicity => self.ethnicity.clone(),
            FieldName::DeathDate => self.death_date.map(|d| d.format(ISO_DATE).to_string()),
            FieldName::DeathDatetime => {
                self.death_datetime.map(|d| d.format(ISO_DATETIME).to_string())
            }
            FieldName::Address1 => self.address_1.clone(),
            FieldName::Address2 => self.address_2.clone(),
            FieldName::City => self.city.clone(),
            FieldName::State => self.state.clone(),
            FieldName::Zip => self.zip.clone(),
        }
    }

    /// Every surface form under which a field value is recognized in text.
    /// Dates and timestamps have both an ISO and a US rendering.
    pub fn field_variants(&self, field: FieldName) -> Vec<String> {
        match field {
            FieldName::NoteDatetime | FieldName::DeathDatetime => {
                let dt = if field == FieldName::NoteDatetime {
                    self.note_datetime
                } else {
                    self.death_datetime
                };
                dt.map(|d| vec![d.format(ISO_DATETIME).to_string(), d.format(US_DATETIME).to_string()])
                    .unwrap_or_default()
            }
            FieldName::DateOfBirth | FieldName::DeathDate => {
                let d = if field == FieldName::DateOfBirth { self.date_of_birth } else { self.death_date };
                d.map(|d| vec![d.format(ISO_DATE).to_string(), d.format(US_DATE).to_string()])
                    .unwrap_or_default()
            }
            _ => self.field_value(field).into_iter().collect(),
        }
    }

    pub fn populated_fields(&self) -> Vec<FieldName> {
        FieldName::ALL.into_iter().filter(|&f| self.field_value(f).is_some()).collect()
    }

    /// Sets a field from its textual form. Empty strings clear the field.
    pub fn set_field(&mut self, field: FieldName, raw: &str) -> Result<(), String> {
        let raw = raw.trim();
        if raw.is_empty() {
            self.clear_field(field);
            return Ok(());
        }
        let text = Some(raw.to_string());
        match field {
            FieldName::NoteDatetime => {
                self.note_datetime = Some(parse_datetime(raw).ok_or("expected a timestamp")?)
            }
            FieldName::DeathDatetime => {
                self.death_datetime = Some(parse_datetime(raw).ok_or("expected a timestamp")?)
            }
            FieldName::DateOfBirth => {
                self.date_of_birth = Some(parse_date(raw).ok_or("expected a date")?)
            }
            FieldName::DeathDate => self.death_date = Some(parse_date(raw).ok_or("expected a date")?),
            FieldName::Mrn => {
                if !raw.bytes().all(|b| b.is_ascii_digit()) {
                    return Err("expected a digit string".into());
                }
                self.mrn = text;
            }
            FieldName::State => {
                if raw.len() != 2 || !raw.bytes().all(|b| b.is_ascii_alphabetic()) {
                    return Err("expected a 2-letter code".into());
                }
                self.state = text;
            }
            FieldName::Zip => {
                if !is_zip(raw) {
                    return Err("expected DDDDD or DDDDD-DDDD".into());
                }
                self.zip = text;
            }
            FieldName::NoteClass => self.note_class = text,
            FieldName::Gender => self.gender = text,
            FieldName::Race => self.race = text,
            FieldName::Ethnicity => self.ethnicity = text,
            FieldName::Address1 => self.address_1 = text,
            FieldName::Address2 => self.address_2 = text,
            FieldName::City => self.city = text,
        }
        Ok(())
    }

    pub fn clear_field(&mut self, field: FieldName) {
        match field {
            FieldName::NoteDatetime => self.note_datetime = None,
            FieldName::NoteClass => self.note_class = None,
            FieldName::Mrn => self.mrn = None,
            FieldName::Gender => self.gender = None,
            FieldName::DateOfBirth => self.date_of_birth = None,
            FieldName::Race => self.race = None,
            FieldName::Ethnicity => self.ethnicity = None,
            FieldName::DeathDate => self.death_date = None,
            FieldName::DeathDatetime => self.death_datetime = None,
            FieldName::Address1 => self.address_1 = None,
            FieldName::Address2 => self.address_2 = None,
            FieldName::City => self.city = None,
            FieldName::State => self.state = None,
            FieldName::Zip => self.zip = None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.patient_id.trim().is_empty() {
            return Err("empty patient_id".into());
        }
        if let (Some(dob), Some(dd)) = (self.date_of_birth, self.death_date) {
            if dd < dob {
                return Err(format!("death_date {dd} precedes date_of_birth {dob}"));
            }
        }
        if let Some(zip) = &self.zip {
            if !is_zip(zip) {
                return Err(format!("zip `{zip}` is not DDDDD or DDDDD-DDDD"));
            }
        }
        Ok(())
    }
}

/// Free-text note linked to one patient. Tokens are always derived from the
/// text with [`tokenize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalNote {
    pub note_id: String,
    pub patient_id: String,
    text: String,
    tokens: Vec<String>,
}

impl ClinicalNote {
    pub fn new(note_id: impl Into<String>, patient_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { note_id: note_id.into(), patient_id: patient_id.into(), text, tokens }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Serialize, Deserialize)]
struct NoteRecord {
    note_id: String,
    patient_id: String,
    text: String,
}

/// What a generated note segment was planted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Field(FieldName),
    Phone,
    Provider,
}

/// A value the generator wrote into a note, with its byte range in the text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plant {
    pub kind: PlantKind,
    pub value: String,
    pub byte_start: usize,
    pub byte_end: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub profiles: Vec<PatientProfile>,
    pub notes: Vec<ClinicalNote>,
    pub seed: u64,
    /// Generator ground truth keyed by note_id; empty for ingested corpora.
    pub plants: BTreeMap<String, Vec<Plant>>,
}

impl Corpus {
    /// Builds a corpus after checking id uniqueness, profile validity and
    /// referential integrity.
    pub fn from_parts(
        profiles: Vec<PatientProfile>,
        notes: Vec<ClinicalNote>,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        let mut ids = HashSet::new();
        for p in &profiles {
            p.validate().map_err(|message| CorpusError::InvalidProfile {
                patient_id: p.patient_id.clone(),
                message,
            })?;
            if !ids.insert(p.patient_id.as_str()) {
                return Err(CorpusError::DuplicatePatient(p.patient_id.clone()));
            }
        }
        let mut note_ids = HashSet::new();
        let mut with_notes = HashSet::new();
        for n in &notes {
            if !ids.contains(n.patient_id.as_str()) {
                return Err(CorpusError::UnknownPatient {
                    note_id: n.note_id.clone(),
                    patient_id: n.patient_id.clone(),
                });
            }
            if !note_ids.insert(n.note_id.as_str()) {
                return Err(CorpusError::DuplicateNote(n.note_id.clone()));
            }
            with_notes.insert(n.patient_id.as_str());
        }
        if let Some(p) = profiles.iter().find(|p| !with_notes.contains(p.patient_id.as_str())) {
            return Err(CorpusError::PatientWithoutNotes(p.patient_id.clone()));
        }
        Ok(Self { profiles, notes, seed, plants: BTreeMap::new() })
    }

    pub fn profile_map(&self) -> HashMap<&str, &PatientProfile> {
        self.profiles.iter().map(|p| (p.patient_id.as_str(), p)).collect()
    }

    pub fn note_map(&self) -> HashMap<&str, &ClinicalNote> {
        self.notes.iter().map(|n| (n.note_id.as_str(), n)).collect()
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.profiles.iter().map(|p| p.patient_id.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Probability that each profile field is populated, indexed by
    /// [`FieldName::index`].
    pub presence: [f64; 14],
    pub template_pool_size: usize,
    /// Probability that a populated field is planted in a given note.
    pub plant_probability: f64,
    /// Each note plants at least this many fields (or all populated ones).
    pub min_planted_fields: usize,
    pub min_filler_sentences: usize,
    pub max_filler_sentences: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            presence: [0.7; 14],
            template_pool_size: 24,
            plant_probability: 0.8,
            min_planted_fields: 3,
            min_filler_sentences: 2,
            max_filler_sentences: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn with_presence(p: f64) -> Self {
        Self { presence: [p; 14], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for field in FieldName::ALL {
            let value = self.presence[field.index()];
            if !(0.0..=1.0).contains(&value) {
                return Err(CorpusError::BadPresence { field, value });
            }
        }
        if !(0.0..=1.0).contains(&self.plant_probability) {
            return Err(CorpusError::Row {
                row: 0,
                field: "plant_probability".into(),
                message: format!("{} outside [0, 1]", self.plant_probability),
            });
        }
        Ok(())
    }
}

const NOTE_CLASSES: &[&str] = &[
    "Telephone encounter",
    "Progress note",
    "Office visit",
    "Discharge summary",
    "Consult note",
    "Radiology report",
    "Patient message",
    "Procedure note",
];
const GENDERS: &[&str] = &["Female", "Male"];
const RACES: &[&str] = &[
    "White",
    "Black or African American",
    "Asian",
    "American Indian or Alaska Native",
    "Native Hawaiian or Other Pacific Islander",
    "Other",
    "Unknown",
];
const ETHNICITIES: &[&str] = &["Not Hispanic or Latino", "Hispanic or Latino", "Unknown"];
const STREETS: &[&str] = &[
    "ETHAN", "MAPLE", "OAK", "CEDAR", "ELM", "PARK", "LEXINGTON", "MADISON", "AMSTERDAM",
    "COLUMBUS", "BROADWAY", "RIVERSIDE", "HUDSON", "FULTON", "NOSTRAND", "FLATBUSH", "ATLANTIC",
    "PROSPECT", "BEDFORD", "GRAND", "UNION", "WASHINGTON", "JEFFERSON", "LINCOLN", "FRANKLIN",
    "HAMILTON", "CHESTNUT", "WALNUT", "SPRUCE", "WILLOW", "HIGHLAND", "LAKEVIEW", "SUNSET",
    "MEADOW", "RIDGE", "VALLEY", "SPRING", "CHURCH", "MILL", "BRIDGE",
];
const STREET_SUFFIXES: &[&str] = &["AVE", "ST", "RD", "BLVD", "LN", "DR", "PL", "CT", "WAY"];
const CITIES: &[(&str, &str, &str)] = &[
    ("NEW YORK", "NY", "100"),
    ("BROOKLYN", "NY", "112"),
    ("BRONX", "NY", "104"),
    ("STATEN ISLAND", "NY", "103"),
    ("YONKERS", "NY", "107"),
    ("WHITE PLAINS", "NY", "106"),
    ("NEW ROCHELLE", "NY", "108"),
    ("FLUSHING", "NY", "113"),
    ("JAMAICA", "NY", "114"),
    ("HEMPSTEAD", "NY", "115"),
    ("HOBOKEN", "NJ", "070"),
    ("JERSEY CITY", "NJ", "073"),
    ("NEWARK", "NJ", "071"),
    ("PATERSON", "NJ", "075"),
    ("STAMFORD", "CT", "069"),
    ("GREENWICH", "CT", "068"),
    ("NEW HAVEN", "CT", "065"),
    ("HARTFORD", "CT", "061"),
    ("PHILADELPHIA", "PA", "191"),
    ("SCRANTON", "PA", "185"),
    ("BOSTON", "MA", "021"),
    ("SPRINGFIELD", "MA", "011"),
    ("MIAMI", "FL", "331"),
    ("ORLANDO", "FL", "328"),
    ("TAMPA", "FL", "336"),
    ("ATLANTA", "GA", "303"),
    ("CHICAGO", "IL", "606"),
    ("HOUSTON", "TX", "770"),
    ("DALLAS", "TX", "752"),
    ("PHOENIX", "AZ", "850"),
    ("DENVER", "CO", "802"),
    ("SEATTLE", "WA", "981"),
];
/// Provider surnames; the default blocklist carries the same names.
pub const PROVIDER_NAMES: &[&str] = &[
    "Smith", "Johnson", "Williams", "Brown", "Jones", "Garcia", "Miller", "Davis", "Rodriguez",
    "Martinez", "Hernandez", "Lopez", "Gonzalez", "Wilson", "Anderson", "Thomas", "Taylor",
    "Moore", "Jackson", "Martin", "Lee", "Perez", "Thompson", "Harris", "Sanchez",
    "Clark", "Ramirez", "Lewis", "Robinson", "Walker", "Young", "Allen", "King", "Wright",
    "Scott", "Torres", "Nguyen", "Hill", "Flores", "Green", "Adams", "Nelson", "Baker", "Hall",
    "Rivera", "Campbell", "Mitchell", "Carter", "Roberts", "Chen", "Patel", "Cohen", "Shah",
];
const DRUGS: &[&str] = &[
    "Lasix", "Coreg", "Entresto", "Eliquis", "Xarelto", "Lipitor", "Toprol", "Aldactone",
    "Farxiga", "Jardiance", "Bumex", "Zocor", "Plavix", "Coumadin", "Digoxin", "Imdur",
];

/// Filler prose. `{drug}`, `{provider}`, `{phone}` and `{n}` are substituted.
const FILLER: &[&str] = &[
    "Patient reports mild dyspnea on exertion without chest pain.",
    "No orthopnea or paroxysmal nocturnal dyspnea reported today.",
    "Lower extremity edema is improved compared with the prior visit.",
    "Continue {drug} {n} mg daily and monitor weight at home.",
    "Blood pressure was {n}/{n} and heart rate {n} at rest.",
    "Echocardiogram showed reduced ejection fraction of {n} percent.",
    "Discussed low sodium diet and fluid restriction with the patient.",
    "Follow up with Dr. {provider} in cardiology clinic in {n} weeks.",
    "Please call the heart failure clinic at {phone} with any questions.",
    "Labs reviewed and creatinine is stable at baseline.",
    "Potassium within normal limits on current regimen.",
    "The patient denies palpitations, syncope or presyncope.",
    "Will titrate {drug} as tolerated by blood pressure.",
    "Seen together with Dr. {provider} who agrees with the plan.",
    "Fax results to {phone} after the study is completed.",
    "Lungs with bibasilar crackles and no wheezing on exam.",
    "Jugular venous pressure is mildly elevated on exam today.",
    "Weight is up {n} pounds since the last clinic visit.",
    "Instructed to hold {drug} if systolic pressure drops below {n}.",
    "Cardiac rehabilitation referral was placed during this visit.",
    "Patient uses a home scale and logs daily weights.",
    "Medication adherence reviewed and pill box provided.",
    "Telemetry showed sinus rhythm with occasional ectopy.",
    "Stress test was negative for inducible ischemia.",
    "Renal function will be rechecked in {n} days.",
    "Discussed goals of care and advance directives.",
    "Vaccinations are up to date per the patient.",
    "No recent hospital admissions for heart failure.",
    "Assessment and plan discussed with the care team.",
    "Return precautions were reviewed in detail.",
    "Swelling of the ankles worsens by the end of the day.",
    "Started {drug} and stopped {drug} because of side effects.",
    "Sleep study is pending for suspected apnea.",
    "Patient ambulates without assistance in the hallway.",
    "Appetite is fair and there is no nausea or vomiting.",
    "Tolerating current diuretic dose without dizziness.",
];

#[derive(Debug, Clone)]
struct Template {
    label_style: [usize; 14],
    fillers: Vec<usize>,
    combined_locality: bool,
}

fn random_date(rng: &mut ChaCha8Rng, from: NaiveDate, days: i64) -> NaiveDate {
    from + Duration::days(rng.gen_range(0..days))
}

fn random_time(rng: &mut ChaCha8Rng) -> (u32, u32, u32) {
    (rng.gen_range(0..24), rng.gen_range(0..12) * 5, 0)
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn render_phone(rng: &mut ChaCha8Rng) -> String {
    let a = rng.gen_range(201..990);
    let b = rng.gen_range(200..999);
    let c = rng.gen_range(0..10000);
    if rng.gen_bool(0.5) {
        format!("({a}){b}-{c:04}")
    } else {
        format!("{a}-{b}-{c:04}")
    }
}

fn generate_profile(
    rng: &mut ChaCha8Rng,
    patient_id: String,
    cfg: &GeneratorConfig,
    used_mrns: &mut HashSet<String>,
) -> PatientProfile {
    let mut p = PatientProfile::new(patient_id);
    let present = |rng: &mut ChaCha8Rng, f: FieldName| rng.gen_bool(cfg.presence[f.index()]);
    // Draw every value so the stream does not depend on presence outcomes.
    let epoch = NaiveDate::from_ymd_opt(1925, 1, 1).expect("valid date");
    let dob = random_date(rng, epoch, 365 * 76);
    let note_day = random_date(rng, NaiveDate::from_ymd_opt(2008, 1, 1).expect("valid date"), 3800);
    let (h, m, s) = random_time(rng);
    let note_dt = note_day.and_hms_opt(h, m, s).expect("valid time");
    let death_day = note_day.max(dob) + Duration::days(rng.gen_range(1..2000));
    let (dh, dm, ds) = random_time(rng);
    let death_dt = death_day.and_hms_opt(dh, dm, ds).expect("valid time");
    let mrn = loop {
        let candidate = format!("{}", rng.gen_range(1_000_000u32..10_000_000));
        if used_mrns.insert(candidate.clone()) {
            break candidate;
        }
    };
    let (city, state, zip3) = CITIES[rng.gen_range(0..CITIES.len())];
    let zip5 = format!("{zip3}{:02}", rng.gen_range(0..100));
    let zip = if rng.gen_bool(0.5) { format!("{zip5}-{:04}", rng.gen_range(0..10000)) } else { zip5 };
    let street = format!(
        "{} {} {}",
        rng.gen_range(1..1000),
        pick(rng, STREETS),
        pick(rng, STREET_SUFFIXES)
    );
    let apt = format!("APT {}{}", rng.gen_range(1..60), (b'A' + rng.gen_range(0..8u8)) as char);
    let note_class = pick(rng, NOTE_CLASSES).to_string();
    let gender = pick(rng, GENDERS).to_string();
    let race = pick(rng, RACES).to_string();
    let ethnicity = pick(rng, ETHNICITIES).to_string();

    if present(rng, FieldName::NoteDatetime) {
        p.note_datetime = Some(note_dt);
    }
    if present(rng, FieldName::NoteClass) {
        p.note_class = Some(note_class);
    }
    if present(rng, FieldName::Mrn) {
        p.mrn = Some(mrn);
    }
    if present(rng, FieldName::Gender) {
        p.gender = Some(gender);
    }
    if present(rng, FieldName::DateOfBirth) {
        p.date_of_birth = Some(dob);
    }
    if present(rng, FieldName::Race) {
        p.race = Some(race);
    }
    if present(rng, FieldName::Ethnicity) {
        p.ethnicity = Some(ethnicity);
    }
    if present(rng, FieldName::DeathDate) {
        p.death_date = Some(death_day);
    }
    if present(rng, FieldName::DeathDatetime) {
        p.death_datetime = Some(death_dt);
    }
    if present(rng, FieldName::Address1) {
        p.address_1 = Some(street);
    }
    if present(rng, FieldName::Address2) {
        p.address_2 = Some(apt);
    }
    if present(rng, FieldName::City) {
        p.city = Some(city.to_string());
    }
    if present(rng, FieldName::State) {
        p.state = Some(state.to_string());
    }
    if present(rng, FieldName::Zip) {
        p.zip = Some(zip);
    }
    p
}

fn field_label(field: FieldName, style: usize) -> (&'static str, &'static str) {
    // (prefix, suffix) around the verbatim value
    let options: &[(&str, &str)] = match field {
        FieldName::NoteDatetime => &[("Note date: ", ""), ("Date of service: ", ""), ("Encounter time ", ".")],
        FieldName::NoteClass => &[("Note type: ", ""), ("Encounter type: ", ""), ("Document: ", ".")],
        FieldName::Mrn => &[("MRN: ", ""), ("Med Rec #: ", ""), ("Medical record number ", ".")],
        FieldName::Gender => &[("Gender: ", ""), ("Sex: ", ""), ("Pt. gender: ", "")],
        FieldName::DateOfBirth => &[("DOB: ", ""), ("Date of birth: ", ""), ("Patient was born ", ".")],
        FieldName::Race => &[("Race: ", ""), ("Race reported as ", ".")],
        FieldName::Ethnicity => &[("Ethnicity: ", ""), ("Ethnicity reported as ", ".")],
        FieldName::DeathDate => &[("Date of death: ", ""), ("Deceased on ", ".")],
        FieldName::DeathDatetime => &[("Time of death: ", ""), ("Death recorded ", ".")],
        FieldName::Address1 => &[("Address: ", ""), ("Lives at ", ".")],
        FieldName::Address2 => &[("Address line 2: ", ""), ("Unit ", ".")],
        FieldName::City => &[("City: ", ""), ("Resides in ", ".")],
        FieldName::State => &[("State: ", ""), ("State of residence: ", "")],
        FieldName::Zip => &[("Zip: ", ""), ("Postal code ", ".")],
    };
    options[style % options.len()]
}

struct NoteBuilder {
    text: String,
    plants: Vec<Plant>,
}

impl NoteBuilder {
    fn new() -> Self {
        Self { text: String::new(), plants: Vec::new() }
    }

    fn push_line(&mut self) {
        if !self.text.is_empty() {
            self.text.push('\n');
        }
    }

    fn push(&mut self, s: &str) {
        self.text.push_str(s);
    }

    fn plant(&mut self, kind: PlantKind, value: &str) {
        let byte_start = self.text.len();
        self.text.push_str(value);
        self.plants.push(Plant { kind, value: value.to_string(), byte_start, byte_end: self.text.len() });
    }

    fn filler(&mut self, rng: &mut ChaCha8Rng, sentence: &str) {
        self.push_line();
        let mut rest = sentence;
        while let Some(open) = rest.find('{') {
            self.push(&rest[..open]);
            let close = open + rest[open..].find('}').expect("balanced filler template");
            match &rest[open + 1..close] {
                "drug" => self.push(pick(rng, DRUGS)),
                "provider" => {
                    let name = pick(rng, PROVIDER_NAMES);
                    self.plant(PlantKind::Provider, name)
                }
                "phone" => {
                    let phone = render_phone(rng);
                    self.plant(PlantKind::Phone, &phone)
                }
                "n" => self.push(&rng.gen_range(2..180).to_string()),
                other => unreachable!("unknown filler slot {other}"),
            }
            rest = &rest[close + 1..];
        }
        self.push(rest);
    }
}

fn render_value(rng: &mut ChaCha8Rng, profile: &PatientProfile, field: FieldName) -> String {
    let variants = profile.field_variants(field);
    variants[rng.gen_range(0..variants.len())].clone()
}

fn render_note(
    rng: &mut ChaCha8Rng,
    profile: &PatientProfile,
    template: &Template,
    cfg: &GeneratorConfig,
) -> (String, Vec<Plant>) {
    let populated = profile.populated_fields();
    let mut planted: Vec<FieldName> =
        populated.iter().copied().filter(|_| rng.gen_bool(cfg.plant_probability)).collect();
    let want = cfg.min_planted_fields.min(populated.len());
    if planted.len() < want {
        let mut missing: Vec<FieldName> =
            populated.iter().copied().filter(|f| !planted.contains(f)).collect();
        missing.shuffle(rng);
        planted.extend(missing.into_iter().take(want - planted.len()));
    }
    planted.shuffle(rng);

    // City, state and zip share one line when the template asks for it.
    let locality = [FieldName::City, FieldName::State, FieldName::Zip];
    let combined = template.combined_locality && locality.iter().all(|f| planted.contains(f));
    let mut lines: Vec<Vec<FieldName>> = Vec::new();
    if combined {
        planted.retain(|f| !locality.contains(f));
        lines.push(locality.to_vec());
    }
    lines.extend(planted.into_iter().map(|f| vec![f]));
    lines.shuffle(rng);

    let n_fill = template.fillers.len();
    let mut slots: Vec<usize> = lines.iter().map(|_| rng.gen_range(0..=n_fill)).collect();
    slots.sort_unstable();

    let mut b = NoteBuilder::new();
    let mut line_iter = lines.into_iter().zip(slots).peekable();
    for pos in 0..=n_fill {
        while let Some((fields, _)) = line_iter.next_if(|(_, s)| *s == pos) {
            b.push_line();
            if fields.len() == 3 {
                let city = render_value(rng, profile, FieldName::City);
                let state = render_value(rng, profile, FieldName::State);
                let zip = render_value(rng, profile, FieldName::Zip);
                b.push("Home: ");
                b.plant(PlantKind::Field(FieldName::City), &city);
                b.push(", ");
                b.plant(PlantKind::Field(FieldName::State), &state);
                b.push(" ");
                b.plant(PlantKind::Field(FieldName::Zip), &zip);
            } else {
                let field = fields[0];
                let (prefix, suffix) = field_label(field, template.label_style[field.index()]);
                let value = render_value(rng, profile, field);
                b.push(prefix);
                b.plant(PlantKind::Field(field), &value);
                b.push(suffix);
            }
        }
        if pos < n_fill {
            b.filler(rng, FILLER[template.fillers[pos]]);
        }
    }
    (b.text, b.plants)
}

/// Generates a synthetic population whose notes embed verbatim profile
/// values in clinical filler prose. Output is a pure function of the
/// arguments.
pub fn generate_population(
    n_patients: usize,
    notes_per_patient: usize,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if n_patients == 0 {
        return Err(CorpusError::NoPatients);
    }
    if notes_per_patient == 0 {
        return Err(CorpusError::NoNotes);
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let templates: Vec<Template> = (0..cfg.template_pool_size.max(1))
        .map(|_| {
            let lo = cfg.min_filler_sentences;
            let hi = cfg.max_filler_sentences.max(lo);
            let n = rng.gen_range(lo..=hi);
            let mut label_style = [0usize; 14];
            for s in label_style.iter_mut() {
                *s = rng.gen_range(0..3);
            }
            Template {
                label_style,
                fillers: (0..n).map(|_| rng.gen_range(0..FILLER.len())).collect(),
                combined_locality: rng.gen_bool(0.5),
            }
        })
        .collect();

    let width = (n_patients.max(2) - 1).to_string().len().max(4);
    let mut used_mrns = HashSet::new();
    let profiles: Vec<PatientProfile> = (0..n_patients)
        .map(|i| generate_profile(&mut rng, format!("P{i:0width$}"), cfg, &mut used_mrns))
        .collect();

    let mut notes = Vec::with_capacity(n_patients * notes_per_patient);
    let mut plants = BTreeMap::new();
    for (i, profile) in profiles.iter().enumerate() {
        for j in 0..notes_per_patient {
            let template = &templates[rng.gen_range(0..templates.len())];
            let (text, planted) = render_note(&mut rng, profile, template, cfg);
            let note_id = format!("N{i:0width$}-{j}");
            plants.insert(note_id.clone(), planted);
            notes.push(ClinicalNote::new(note_id, profile.patient_id.clone(), text));
        }
    }
    let mut corpus = Corpus::from_parts(profiles, notes, seed)?;
    corpus.plants = plants;
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// Ingestion and export
// ---------------------------------------------------------------------------

pub fn profile_csv_header() -> Vec<&'static str> {
    std::iter::once("patient_id").chain(FieldName::ALL.iter().map(|f| f.as_str())).collect()
}

/// Reads profiles from CSV. Columns may appear in any order; unknown columns
/// and missing columns are rejected.
pub fn ingest_profiles(path: impl AsRef<Path>) -> Result<Vec<PatientProfile>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut columns: Vec<Option<FieldName>> = Vec::with_capacity(headers.len());
    let mut id_col = None;
    for (i, h) in headers.iter().enumerate() {
        if h == "patient_id" {
            id_col = Some(i);
            columns.push(None);
        } else {
            let field = h.parse::<FieldName>().map_err(|message| CorpusError::Row {
                row: 1,
                field: h.to_string(),
                message,
            })?;
            columns.push(Some(field));
        }
    }
    let id_col = id_col.ok_or_else(|| CorpusError::Row {
        row: 1,
        field: "patient_id".into(),
        message: "missing column".into(),
    })?;
    for field in FieldName::ALL {
        if !columns.contains(&Some(field)) {
            return Err(CorpusError::Row { row: 1, field: field.to_string(), message: "missing column".into() });
        }
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record?;
        let id = record.get(id_col).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(CorpusError::Row { row, field: "patient_id".into(), message: "empty".into() });
        }
        let mut profile = PatientProfile::new(id.clone());
        for (col, field) in columns.iter().enumerate() {
            if let Some(field) = field {
                profile
                    .set_field(*field, record.get(col).unwrap_or(""))
                    .map_err(|message| CorpusError::Row { row, field: field.to_string(), message })?;
            }
        }
        profile.validate().map_err(|message| CorpusError::Row { row, field: "profile".into(), message })?;
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicatePatient(id));
        }
        out.push(profile);
    }
    Ok(out)
}

/// Reads notes from JSONL. Blank lines are skipped.
pub fn ingest_notes(path: impl AsRef<Path>) -> Result<Vec<ClinicalNote>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NoteRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Row {
            row,
            field: "record".into(),
            message: e.to_string(),
        })?;
        if rec.note_id.is_empty() {
            return Err(CorpusError::Row { row, field: "note_id".into(), message: "empty".into() });
        }
        if rec.patient_id.is_empty() {
            return Err(CorpusError::Row { row, field: "patient_id".into(), message: "empty".into() });
        }
        if !seen.insert(rec.note_id.clone()) {
            return Err(CorpusError::DuplicateNote(rec.note_id));
        }
        out.push(ClinicalNote::new(rec.note_id, rec.patient_id, rec.text));
    }
    Ok(out)
}

/// Loads `profiles.csv` and `notes.jsonl` from a directory and validates
/// referential integrity.
pub fn load_corpus(dir: impl AsRef<Path>, seed: u64) -> Result<Corpus, CorpusError> {
    let dir = dir.as_ref();
    let profiles = ingest_profiles(dir.join("profiles.csv"))?;
    let notes = ingest_notes(dir.join("notes.jsonl"))?;
    Corpus::from_parts(profiles, notes, seed)
}

pub fn write_profiles_csv<W: Write>(w: W, profiles: &[PatientProfile]) -> Result<(), CorpusError> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(profile_csv_header())?;
    for p in profiles {
        let mut row = vec![p.patient_id.clone()];
        row.extend(FieldName::ALL.iter().map(|&f| p.field_value(f).unwrap_or_default()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_notes_jsonl<W: Write>(mut w: W, notes: &[ClinicalNote]) -> Result<(), CorpusError> {
    for n in notes {
        let rec = NoteRecord { note_id: n.note_id.clone(), patient_id: n.patient_id.clone(), text: n.text.clone() };
        let line = serde_json::to_string(&rec).map_err(|e| CorpusError::Io(e.into()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Relevancy, selection, splits
// ---------------------------------------------------------------------------

/// Number of distinct populated profile fields whose value occurs entirely
/// within the first `prefix_tokens` tokens of the note.
pub fn relevancy(note: &ClinicalNote, profile: &PatientProfile, prefix_tokens: usize) -> usize {
    let prefix = &note.tokens()[..note.tokens().len().min(prefix_tokens)];
    let hay = normalize_tokens(prefix);
    field_occurrences(&hay, profile).len()
}

/// Picks, for each patient, the note with the highest relevancy; ties go to
/// the lexicographically smallest note_id.
pub fn select_note_per_patient(corpus: &Corpus, prefix_tokens: usize) -> BTreeMap<String, String> {
    let profiles = corpus.profile_map();
    let mut best: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for note in &corpus.notes {
        let Some(profile) = profiles.get(note.patient_id.as_str()) else { continue };
        let score = relevancy(note, profile, prefix_tokens);
        match best.get_mut(&note.patient_id) {
            Some((s, id)) => {
                if score > *s || (score == *s && note.note_id < *id) {
                    *s = score;
                    *id = note.note_id.clone();
                }
            }
            None => {
                best.insert(note.patient_id.clone(), (score, note.note_id.clone()));
            }
        }
    }
    best.into_iter().map(|(p, (_, n))| (p, n)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.70, 0.15, 0.15];

/// Largest-remainder apportionment of `n` items over `ratios`. Ties in the
/// fractional parts go to the earlier split.
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Seeded patient-level train/validation/test split.
pub fn split_corpus(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment, CorpusError> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios.to_vec()));
    }
    let mut ids = corpus.patient_ids();
    if ids.len() < ratios.len() {
        return Err(CorpusError::TooFewPatients { patients: ids.len(), splits: ratios.len() });
    }
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let sizes = apportion(ids.len(), &ratios);
    let mut it = ids.into_iter();
    let train = it.by_ref().take(sizes[0]).collect();
    let validation = it.by_ref().take(sizes[1]).collect();
    let test = it.collect();
    Ok(SplitAssignment { train, validation, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_profile() -> PatientProfile {
        let mut p = PatientProfile::new("P1");
        p.mrn = Some("1234943".into());
        p.city = Some("NEW YORK".into());
        p.state = Some("NY".into());
        p
    }

    #[test]
    fn all_fields_present_with_unique_mrns() {
        let c = generate_population(3, 1, &GeneratorConfig::with_presence(1.0), 7).unwrap();
        assert_eq!(c.profiles.len(), 3);
        assert_eq!(c.notes.len(), 3);
        for p in &c.profiles {
            assert_eq!(p.populated_fields().len(), 14);
        }
        let mrns: HashSet<_> = c.profiles.iter().map(|p| p.mrn.clone().unwrap()).collect();
        assert_eq!(mrns.len(), 3);
    }

    #[test]
    fn zero_presence_gives_bare_profiles() {
        let c = generate_population(1, 1, &GeneratorConfig::with_presence(0.0), 3).unwrap();
        assert!(c.profiles[0].populated_fields().is_empty());
        let plants = &c.plants[&c.notes[0].note_id];
        assert!(plants.iter().all(|p| !matches!(p.kind, PlantKind::Field(_))));
    }

    #[test]
    fn generator_rejects_bad_arguments() {
        assert!(matches!(
            generate_population(0, 1, &GeneratorConfig::default(), 1),
            Err(CorpusError::NoPatients)
        ));
        let mut cfg = GeneratorConfig::default();
        cfg.presence[FieldName::Zip.index()] = 1.5;
        assert!(matches!(generate_population(2, 1, &cfg, 1), Err(CorpusError::BadPresence { .. })));
    }

    #[test]
    fn planted_values_are_verbatim() {
        let c = generate_population(50, 2, &GeneratorConfig::default(), 11).unwrap();
        for note in &c.notes {
            for plant in &c.plants[&note.note_id] {
                assert_eq!(&note.text()[plant.byte_start..plant.byte_end], plant.value);
            }
        }
    }

    #[test]
    fn relevancy_counts_fields_in_prefix() {
        let p = tiny_profile();
        let note = ClinicalNote::new("n", "P1", "MRN: 1234943 lives in NEW YORK today");
        // "NY" is not a standalone token here
        assert_eq!(relevancy(&note, &p, 512), 2);
    }

    #[test]
    fn relevancy_prefix_boundary() {
        let p = tiny_profile();
        let note = ClinicalNote::new("n", "P1", "a b c 1234943");
        assert_eq!(relevancy(&note, &p, 3), 0);
        assert_eq!(relevancy(&note, &p, 4), 1);
        let empty = PatientProfile::new("P1");
        assert_eq!(relevancy(&note, &empty, 512), 0);
    }

    #[test]
    fn selection_argmax_and_ties() {
        let p = tiny_profile();
        let notes = vec![
            ClinicalNote::new("b", "P1", "1234943"),
            ClinicalNote::new("a", "P1", "1234943 NEW YORK NY"),
        ];
        let c = Corpus::from_parts(vec![p.clone()], notes, 0).unwrap();
        assert_eq!(select_note_per_patient(&c, 512)["P1"], "a");
        let tied = vec![ClinicalNote::new("z", "P1", "1234943"), ClinicalNote::new("y", "P1", "NY")];
        let c = Corpus::from_parts(vec![p], tied, 0).unwrap();
        assert_eq!(select_note_per_patient(&c, 512)["P1"], "y");
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        assert_eq!(apportion(20, &DEFAULT_SPLIT), vec![14, 3, 3]);
        assert_eq!(apportion(100, &DEFAULT_SPLIT), vec![70, 15, 15]);
        let c = generate_population(20, 1, &GeneratorConfig::default(), 5).unwrap();
        let s = split_corpus(&c, DEFAULT_SPLIT, 9).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (14, 3, 3));
        assert_eq!(s, split_corpus(&c, DEFAULT_SPLIT, 9).unwrap());
        assert!(s.train.is_disjoint(&s.test) && s.train.is_disjoint(&s.validation));
    }

    #[test]
    fn split_errors() {
        let c = generate_population(2, 1, &GeneratorConfig::default(), 5).unwrap();
        assert!(matches!(split_corpus(&c, DEFAULT_SPLIT, 1), Err(CorpusError::TooFewPatients { .. })));
        assert!(matches!(split_corpus(&c, [0.5, 0.5, 0.0], 1), Err(CorpusError::BadRatios(_))));
    }

    #[test]
    fn referential_integrity() {
        let notes = vec![ClinicalNote::new("n1", "ghost", "text")];
        let err = Corpus::from_parts(vec![PatientProfile::new("P1")], notes, 0).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn death_before_birth_is_invalid() {
        let mut p = PatientProfile::new("P1");
        p.set_field(FieldName::DateOfBirth, "1950-01-02").unwrap();
        p.set_field(FieldName::DeathDate, "01/01/1950").unwrap();
        assert!(p.validate().is_err());
        assert!(p.set_field(FieldName::Zip, "1043").is_err());
        assert!(p.set_field(FieldName::Zip, "10432-3243").is_ok());
    }
}
