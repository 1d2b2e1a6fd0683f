//! Flat-file store for catalogs, transactions and choice-model parameters.
//!
//! On disk a store is a directory with one sub-directory per dataset:
//!
//! ```text
//! <root>/ingest.log                    append-only record of every write
//! <root>/<dataset>/catalog.csv         product_id,name,price
//! <root>/<dataset>/source              path the catalog was ingested from
//! <root>/<dataset>/parameters-<model>.csv
//! <root>/<dataset>/transactions.csv    date,user_id,product_id,quantity
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, so
//! readers never see a partial file. Writers are serialized by one lock.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use interassort_core::{
    Assortment, Catalog, ChoiceError, MnlParameters, OfferSetObservation, Product, ProductId,
    TransactionRecord,
};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub const CATALOG_HEADER: [&str; 3] = ["product_id", "name", "price"];
pub const PARAMETERS_HEADER: [&str; 4] = ["dataset", "model", "product_id", "utility"];

/// Lowercases, trims and joins internal whitespace with hyphens:
/// `"Ta-Feng  Dataset"` becomes `"ta-feng-dataset"`.
pub fn normalize_name(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("-")
}

fn valid_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphanumeric())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParameterKey {
    dataset_id: String,
    model_id: String,
}

impl ParameterKey {
    pub fn new(dataset: &str, model: &str) -> Result<Self, StoreError> {
        let dataset_id = normalize_name(dataset);
        let model_id = normalize_name(model);
        for name in [&dataset_id, &model_id] {
            if !valid_name(name) {
                return Err(StoreError::InvalidName(name.clone()));
            }
        }
        Ok(ParameterKey {
            dataset_id,
            model_id,
        })
    }

    pub fn dataset(&self) -> &str {
        &self.dataset_id
    }

    pub fn model(&self) -> &str {
        &self.model_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub product_count: usize,
    pub available_models: BTreeSet<String>,
    pub source_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowIssue {
    /// 1-based line number in the file, the header being line 1.
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    Header {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: {} invalid row(s): {}", rows.len(), summarize(rows))]
    Rows { path: String, rows: Vec<RowIssue> },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

fn summarize(rows: &[RowIssue]) -> String {
    let mut parts: Vec<String> = rows
        .iter()
        .take(10)
        .map(|r| format!("line {}: {}", r.line, r.message))
        .collect();
    if rows.len() > 10 {
        parts.push(format!("... and {} more", rows.len() - 10));
    }
    parts.join("; ")
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown dataset `{dataset}` (available: {})", list_or_none(available))]
    UnknownDataset {
        dataset: String,
        available: Vec<String>,
    },
    #[error(
        "dataset `{dataset}` has no parameters for model `{model}` (available: {})",
        list_or_none(available)
    )]
    UnknownModel {
        dataset: String,
        model: String,
        available: Vec<String>,
    },
    #[error("`{0}` is not a valid dataset or model name")]
    InvalidName(String),
    #[error("parameters rejected: {0}")]
    InvalidParameters(#[from] ChoiceError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

pub(crate) fn list_or_none(names: &[String]) -> String {
    if names.is_empty() {
        "none".to_string()
    } else {
        names.join(", ")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub valid_count: usize,
    pub skipped_count: usize,
    pub skipped_unknown_product: usize,
    pub skipped_malformed: usize,
    /// Distinct customers among the valid rows.
    pub distinct_users: usize,
}

fn open_reader(path: &Path, delimiter: u8) -> Result<csv::Reader<fs::File>, IngestError> {
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file))
}

fn check_header(
    reader: &mut csv::Reader<fs::File>,
    path: &Path,
    expected: &[&str],
) -> Result<(), IngestError> {
    let headers = reader.headers().map_err(|source| IngestError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    let found: Vec<String> = headers.iter().map(|h| h.to_lowercase()).collect();
    if found != expected {
        return Err(IngestError::Header {
            path: path.display().to_string(),
            expected: expected.join(","),
            found: headers.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

/// Reads a `product_id,name,price` file. All offending rows are reported
/// together.
pub fn ingest_catalog(path: &Path, dataset_id: &str) -> Result<Catalog, IngestError> {
    let display = path.display().to_string();
    let mut reader = open_reader(path, b',')?;
    check_header(&mut reader, path, &CATALOG_HEADER)?;

    let mut products = Vec::new();
    let mut issues = Vec::new();
    let mut first_seen: BTreeMap<ProductId, u64> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            path: display.clone(),
            source,
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut bad = |message: String| issues.push(RowIssue { line, message });
        if record.len() != 3 {
            bad(format!("expected 3 fields, found {}", record.len()));
            continue;
        }
        let id = match record[0].parse::<u64>() {
            Ok(id) if id > 0 => ProductId(id),
            _ => {
                bad(format!(
                    "product_id `{}` is not a positive integer",
                    &record[0]
                ));
                continue;
            }
        };
        let price = match record[2].parse::<f64>() {
            Ok(p) if p.is_finite() && p > 0.0 => p,
            Ok(p) => {
                bad(format!("price {p} is not positive"));
                continue;
            }
            Err(_) => {
                bad(format!("price `{}` is not a number", &record[2]));
                continue;
            }
        };
        if let Some(&prev) = first_seen.get(&id) {
            bad(format!(
                "duplicate product_id {id} (first seen on line {prev})"
            ));
            continue;
        }
        first_seen.insert(id, line);
        products.push(Product::new(id, &record[1], price));
    }
    if !issues.is_empty() {
        return Err(IngestError::Rows {
            path: display,
            rows: issues,
        });
    }
    Catalog::new(dataset_id, products).map_err(|e| IngestError::Rows {
        path: display,
        rows: vec![RowIssue {
            line: 0,
            message: e.to_string(),
        }],
    })
}

const DATE_FORMATS: [&str; 4] = ["%Y-%m-%d", "%m/%d/%Y", "%Y/%m/%d", "%Y-%m-%d %H:%M:%S"];

fn parse_date(raw: &str) -> Option<NaiveDate> {
    DATE_FORMATS
        .iter()
        .find_map(|f| NaiveDate::parse_from_str(raw, f).ok())
}

/// Reads a Ta-Feng layout transaction file:
/// `transaction_date, customer_id, age_group, pin_code, product_subclass,
/// product_id, amount, asset, sales_price`, delimited by `;` or `,` (decided
/// from the header line). Only date, customer, product and amount are kept.
///
/// Rows for products outside `catalog` and malformed rows are skipped and
/// counted, so `valid_count + skipped_count == rows` always holds.
pub fn ingest_transactions(
    path: &Path,
    catalog: &Catalog,
) -> Result<(Vec<TransactionRecord>, IngestReport), IngestError> {
    let display = path.display().to_string();
    let io_err = |source| IngestError::Io {
        path: display.clone(),
        source,
    };
    let mut first_line = String::new();
    {
        use std::io::BufRead;
        let file = fs::File::open(path).map_err(io_err)?;
        io::BufReader::new(file)
            .read_line(&mut first_line)
            .map_err(io_err)?;
    }
    let mut report = IngestReport::default();
    if first_line.trim().is_empty() {
        return Ok((Vec::new(), report));
    }
    let delimiter = if first_line.contains(';') { b';' } else { b',' };
    let mut reader = open_reader(path, delimiter)?;

    let mut records = Vec::new();
    let mut users: HashSet<String> = HashSet::new();
    let mut row = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut row) {
            Ok(true) => {}
            Ok(false) => break,
            Err(source) => {
                // A broken row (bad UTF-8 and the like) is skipped, not fatal.
                if source.is_io_error() {
                    return Err(IngestError::Csv {
                        path: display,
                        source,
                    });
                }
                report.rows += 1;
                report.skipped_malformed += 1;
                continue;
            }
        }
        report.rows += 1;
        let parsed = (row.len() >= 7)
            .then(|| {
                Some((
                    parse_date(&row[0])?,
                    Some(&row[1]).filter(|u| !u.is_empty())?,
                    row[5].parse::<u64>().ok()?,
                    row[6].parse::<u32>().ok().filter(|&q| q >= 1)?,
                ))
            })
            .flatten();
        let Some((date, user, product, quantity)) = parsed else {
            report.skipped_malformed += 1;
            continue;
        };
        let product_id = ProductId(product);
        if !catalog.contains(product_id) {
            report.skipped_unknown_product += 1;
            continue;
        }
        if !users.contains(user) {
            users.insert(user.to_string());
        }
        records.push(TransactionRecord {
            date,
            user_id: user.to_string(),
            product_id,
            quantity,
        });
    }
    report.valid_count = records.len();
    report.skipped_count = report.skipped_malformed + report.skipped_unknown_product;
    report.distinct_users = users.len();
    Ok((records, report))
}

/// Parameters parsed from one parameters file, grouped by key.
#[derive(Debug, Clone)]
pub struct ParsedParameters {
    pub key: ParameterKey,
    pub params: MnlParameters,
    /// Products listed with utility exactly 0; they are left out.
    pub dropped: Vec<ProductId>,
}

/// Reads a `dataset,model,product_id,utility` file. Product id 0 carries the
/// no-purchase weight and is mandatory for every (dataset, model) pair.
pub fn ingest_parameters(path: &Path) -> Result<Vec<ParsedParameters>, IngestError> {
    let display = path.display().to_string();
    let mut reader = open_reader(path, b',')?;
    check_header(&mut reader, path, &PARAMETERS_HEADER)?;

    #[derive(Default)]
    struct Group {
        v0: Option<f64>,
        utilities: BTreeMap<ProductId, f64>,
        dropped: Vec<ProductId>,
        first_line: u64,
    }
    let mut groups: BTreeMap<ParameterKey, Group> = BTreeMap::new();
    let mut issues = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            path: display.clone(),
            source,
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut bad = |message: String| issues.push(RowIssue { line, message });
        if record.len() != 4 {
            bad(format!("expected 4 fields, found {}", record.len()));
            continue;
        }
        let Ok(key) = ParameterKey::new(&record[0], &record[1]) else {
            bad(format!(
                "invalid dataset/model `{}`/`{}`",
                &record[0], &record[1]
            ));
            continue;
        };
        let Ok(id) = record[2].parse::<u64>().map(ProductId) else {
            bad(format!("product_id `{}` is not an integer", &record[2]));
            continue;
        };
        let value = match record[3].parse::<f64>() {
            Ok(v) if v.is_finite() && (0.0..=1.0).contains(&v) => v,
            _ => {
                bad(format!("utility `{}` is outside [0, 1]", &record[3]));
                continue;
            }
        };
        let group = groups.entry(key).or_insert_with(|| Group {
            first_line: line,
            ..Group::default()
        });
        let duplicate = if id.is_no_purchase() {
            group.v0.replace(value).is_some()
        } else if value == 0.0 {
            group.dropped.push(id);
            false
        } else {
            group.utilities.insert(id, value).is_some()
        };
        if duplicate {
            bad(format!("duplicate row for product_id {id}"));
        }
    }

    let mut parsed = Vec::new();
    for (key, group) in groups {
        let Some(v0) = group.v0.filter(|&v| v > 0.0) else {
            issues.push(RowIssue {
                line: group.first_line,
                message: format!(
                    "{}/{}: missing or zero no-purchase weight (product_id 0)",
                    key.dataset(),
                    key.model()
                ),
            });
            continue;
        };
        match MnlParameters::new(key.dataset(), key.model(), v0, group.utilities) {
            Ok(params) => parsed.push(ParsedParameters {
                key,
                params,
                dropped: group.dropped,
            }),
            Err(e) => issues.push(RowIssue {
                line: group.first_line,
                message: e.to_string(),
            }),
        }
    }
    if !issues.is_empty() {
        issues.sort_by_key(|i| i.line);
        return Err(IngestError::Rows {
            path: display,
            rows: issues,
        });
    }
    Ok(parsed)
}

pub const OBSERVATIONS_HEADER: [&str; 2] = ["offered", "chosen"];

/// Reads offer-set observations: `offered` lists the offered product ids
/// separated by spaces, `chosen` is one of them or 0 for no purchase.
pub fn read_observations(path: &Path) -> Result<Vec<OfferSetObservation>, IngestError> {
    let display = path.display().to_string();
    let mut reader = open_reader(path, b',')?;
    check_header(&mut reader, path, &OBSERVATIONS_HEADER)?;
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            path: display.clone(),
            source,
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let offered: Result<Assortment, _> = record
            .get(0)
            .unwrap_or_default()
            .split_whitespace()
            .map(|t| t.parse::<u64>().map(ProductId))
            .collect();
        let chosen = record
            .get(1)
            .unwrap_or_default()
            .parse::<u64>()
            .map(ProductId);
        match (offered, chosen) {
            (Ok(offered), Ok(chosen)) if chosen.is_no_purchase() || offered.contains(chosen) => {
                out.push(OfferSetObservation { offered, chosen })
            }
            _ => issues.push(RowIssue {
                line,
                message: "expected space-separated offered ids and a chosen id among them or 0"
                    .into(),
            }),
        }
    }
    if !issues.is_empty() {
        return Err(IngestError::Rows {
            path: display,
            rows: issues,
        });
    }
    Ok(out)
}

/// Inverse of [`read_observations`].
pub fn write_observations(path: &Path, observations: &[OfferSetObservation]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(OBSERVATIONS_HEADER)?;
    for o in observations {
        let offered: Vec<String> = o.offered.iter().map(|id| id.to_string()).collect();
        w.write_record([offered.join(" "), o.chosen.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    write_atomic(path, &bytes)
}

#[derive(Debug)]
struct ModelEntry {
    params: Arc<MnlParameters>,
    /// The catalog restricted to products with a utility under this model.
    catalog: Arc<Catalog>,
}

#[derive(Debug)]
struct DatasetEntry {
    catalog: Arc<Catalog>,
    source_path: String,
    models: BTreeMap<String, ModelEntry>,
}

/// The parameter database. Cheap to share behind an `Arc`.
#[derive(Debug)]
pub struct Store {
    root: Option<PathBuf>,
    datasets: RwLock<BTreeMap<String, DatasetEntry>>,
    writer: Mutex<()>,
}

fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn catalog_csv(catalog: &Catalog) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CATALOG_HEADER).expect("in-memory write");
    for p in catalog.products() {
        w.write_record([p.id.to_string(), p.name.clone(), p.price.to_string()])
            .expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// `f64` `Display` prints the shortest string that parses back to the same
/// value, which keeps round trips bit-exact.
fn parameters_csv(params: &MnlParameters) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PARAMETERS_HEADER).expect("in-memory write");
    let rows = std::iter::once((ProductId::NO_PURCHASE, params.v0()))
        .chain(params.utilities().iter().map(|(&id, &v)| (id, v)));
    for (id, v) in rows {
        w.write_record([
            params.dataset_id.as_str(),
            params.model_id.as_str(),
            &id.to_string(),
            &v.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

fn transactions_csv(records: &[TransactionRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", "user_id", "product_id", "quantity"])
        .expect("in-memory write");
    for r in records {
        w.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.user_id.clone(),
            r.product_id.to_string(),
            r.quantity.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

impl Store {
    /// A store that lives only in memory; nothing is persisted.
    pub fn in_memory() -> Self {
        Store {
            root: None,
            datasets: RwLock::new(BTreeMap::new()),
            writer: Mutex::new(()),
        }
    }

    /// Opens (creating if needed) the store rooted at `root` and loads every
    /// dataset found there.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut datasets = BTreeMap::new();
        let mut dirs: Vec<_> = fs::read_dir(&root)?
            .filter_map(Result::ok)
            .filter(|e| e.path().join("catalog.csv").is_file())
            .collect();
        dirs.sort_by_key(|e| e.file_name());
        for dir in dirs {
            let dataset = dir.file_name().to_string_lossy().into_owned();
            let path = dir.path();
            let catalog = Arc::new(ingest_catalog(&path.join("catalog.csv"), &dataset)?);
            let source_path = fs::read_to_string(path.join("source"))
                .map(|s| s.trim().to_string())
                .unwrap_or_default();
            let mut models = BTreeMap::new();
            for file in fs::read_dir(&path)?.filter_map(Result::ok) {
                let name = file.file_name().to_string_lossy().into_owned();
                if !(name.starts_with("parameters-") && name.ends_with(".csv")) {
                    continue;
                }
                for parsed in ingest_parameters(&file.path())? {
                    let entry = model_entry(&catalog, parsed.params)?;
                    models.insert(parsed.key.model().to_string(), entry);
                }
            }
            datasets.insert(
                dataset,
                DatasetEntry {
                    catalog,
                    source_path,
                    models,
                },
            );
        }
        Ok(Store {
            root: Some(root),
            datasets: RwLock::new(datasets),
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn log(&self, kind: &str, dataset: &str, detail: &str) -> io::Result<()> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(root.join("ingest.log"))?;
        writeln!(
            file,
            "{}\t{kind}\t{dataset}\t{detail}",
            chrono::Utc::now().to_rfc3339()
        )
    }

    fn dataset_dir(&self, dataset: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(dataset))
    }

    /// Stores (or replaces) a dataset's catalog. Replacing a catalog drops
    /// the parameters and transactions recorded against the old one.
    pub fn put_catalog(&self, catalog: Catalog, source_path: &str) -> Result<(), StoreError> {
        let dataset = normalize_name(catalog.dataset_id());
        if !valid_name(&dataset) {
            return Err(StoreError::InvalidName(dataset));
        }
        let catalog = if dataset == catalog.dataset_id() {
            catalog
        } else {
            Catalog::new(dataset.clone(), catalog.products().to_vec())?
        };
        let _guard = self.writer.lock();
        if let Some(dir) = self.dataset_dir(&dataset) {
            if dir.exists() {
                for entry in fs::read_dir(&dir)?.filter_map(Result::ok) {
                    let name = entry.file_name().to_string_lossy().into_owned();
                    if name.starts_with("parameters-") || name == "transactions.csv" {
                        fs::remove_file(entry.path())?;
                    }
                }
            }
            write_atomic(&dir.join("catalog.csv"), &catalog_csv(&catalog))?;
            write_atomic(&dir.join("source"), source_path.as_bytes())?;
        }
        self.log(
            "catalog",
            &dataset,
            &format!("{} products from {source_path}", catalog.len()),
        )?;
        self.datasets.write().insert(
            dataset,
            DatasetEntry {
                catalog: Arc::new(catalog),
                source_path: source_path.to_string(),
                models: BTreeMap::new(),
            },
        );
        Ok(())
    }

    fn unknown_dataset(&self, dataset: &str) -> StoreError {
        StoreError::UnknownDataset {
            dataset: dataset.to_string(),
            available: self.datasets.read().keys().cloned().collect(),
        }
    }

    pub fn catalog(&self, dataset: &str) -> Result<Arc<Catalog>, StoreError> {
        let dataset = normalize_name(dataset);
        self.datasets
            .read()
            .get(&dataset)
            .map(|d| d.catalog.clone())
            .ok_or_else(|| self.unknown_dataset(&dataset))
    }

    /// Stores parameters for `key`. Every utility must belong to a product of
    /// the dataset's catalog; catalog products without a utility are outside
    /// the choice universe for this model.
    pub fn put_parameters(
        &self,
        key: &ParameterKey,
        params: MnlParameters,
    ) -> Result<(), StoreError> {
        let _guard = self.writer.lock();
        let catalog = self.catalog(key.dataset())?;
        let mut params = params;
        params.dataset_id = key.dataset().to_string();
        params.model_id = key.model().to_string();
        let entry = model_entry(&catalog, params)?;
        if entry.catalog.len() < catalog.len() {
            warn!(
                dataset = key.dataset(),
                model = key.model(),
                missing = catalog.len() - entry.catalog.len(),
                "catalog products without a utility are left out of the choice universe"
            );
        }
        if let Some(dir) = self.dataset_dir(key.dataset()) {
            let file = dir.join(format!("parameters-{}.csv", key.model()));
            write_atomic(&file, &parameters_csv(&entry.params))?;
        }
        self.log(
            "parameters",
            key.dataset(),
            &format!(
                "model {} with {} utilities",
                key.model(),
                entry.catalog.len()
            ),
        )?;
        if let Some(d) = self.datasets.write().get_mut(key.dataset()) {
            d.models.insert(key.model().to_string(), entry);
        }
        Ok(())
    }

    pub fn get_parameters(&self, key: &ParameterKey) -> Result<Arc<MnlParameters>, StoreError> {
        self.resolve(key).map(|(_, p)| p)
    }

    /// Parameters for `key` together with the catalog they cover exactly.
    pub fn resolve(
        &self,
        key: &ParameterKey,
    ) -> Result<(Arc<Catalog>, Arc<MnlParameters>), StoreError> {
        let datasets = self.datasets.read();
        let Some(entry) = datasets.get(key.dataset()) else {
            return Err(StoreError::UnknownDataset {
                dataset: key.dataset().to_string(),
                available: datasets.keys().cloned().collect(),
            });
        };
        match entry.models.get(key.model()) {
            Some(m) => Ok((m.catalog.clone(), m.params.clone())),
            None => Err(StoreError::UnknownModel {
                dataset: key.dataset().to_string(),
                model: key.model().to_string(),
                available: entry.models.keys().cloned().collect(),
            }),
        }
    }

    pub fn put_transactions(
        &self,
        dataset: &str,
        records: &[TransactionRecord],
    ) -> Result<(), StoreError> {
        let dataset = normalize_name(dataset);
        let _guard = self.writer.lock();
        self.catalog(&dataset)?;
        if let Some(dir) = self.dataset_dir(&dataset) {
            write_atomic(&dir.join("transactions.csv"), &transactions_csv(records))?;
        }
        self.log("transactions", &dataset, &format!("{} rows", records.len()))?;
        Ok(())
    }

    /// Transactions previously stored for `dataset` (persistent stores only).
    pub fn transactions(&self, dataset: &str) -> Result<Vec<TransactionRecord>, StoreError> {
        let dataset = normalize_name(dataset);
        self.catalog(&dataset)?;
        let Some(path) = self
            .dataset_dir(&dataset)
            .map(|d| d.join("transactions.csv"))
        else {
            return Ok(Vec::new());
        };
        if !path.exists() {
            return Ok(Vec::new());
        }
        let display = path.display().to_string();
        let mut reader = open_reader(&path, b',')?;
        let mut out = Vec::new();
        for record in reader.deserialize() {
            let row: StoredTransaction = record.map_err(|source| IngestError::Csv {
                path: display.clone(),
                source,
            })?;
            out.push(TransactionRecord {
                date: row.date,
                user_id: row.user_id,
                product_id: ProductId(row.product_id),
                quantity: row.quantity,
            });
        }
        Ok(out)
    }

    pub fn list_datasets(&self) -> Vec<DatasetDescriptor> {
        self.datasets
            .read()
            .iter()
            .map(|(id, d)| DatasetDescriptor {
                dataset_id: id.clone(),
                product_count: d.catalog.len(),
                available_models: d.models.keys().cloned().collect(),
                source_path: d.source_path.clone(),
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct StoredTransaction {
    date: NaiveDate,
    user_id: String,
    product_id: u64,
    quantity: u32,
}

fn model_entry(catalog: &Catalog, params: MnlParameters) -> Result<ModelEntry, StoreError> {
    if let Some(id) = params.utilities().keys().find(|id| !catalog.contains(**id)) {
        return Err(ChoiceError::ParameterMismatch(format!(
            "product {id} is not in catalog {}",
            catalog.dataset_id()
        ))
        .into());
    }
    if params.utilities().is_empty() {
        return Err(ChoiceError::ParameterMismatch("no product utilities".into()).into());
    }
    let restricted = catalog.restrict_to(&params);
    params.validate_against(&restricted)?;
    Ok(ModelEntry {
        params: Arc::new(params),
        catalog: Arc::new(restricted),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn two_product_catalog(dataset: &str) -> Catalog {
        Catalog::new(
            dataset,
            vec![
                Product::new(1u64, "milk", 10.0),
                Product::new(2u64, "bread", 8.0),
            ],
        )
        .unwrap()
    }

    fn params(dataset: &str, model: &str) -> MnlParameters {
        let utilities = [(ProductId(1), 0.1 + 0.2), (ProductId(2), 1.0 / 3.0)]
            .into_iter()
            .collect();
        MnlParameters::new(dataset, model, 0.7, utilities).unwrap()
    }

    #[test]
    fn normalizes_names() {
        assert_eq!(normalize_name("  Ta-Feng   Grocery "), "ta-feng-grocery");
        let key = ParameterKey::new("TA-FENG", "MNL").unwrap();
        assert_eq!((key.dataset(), key.model()), ("ta-feng", "mnl"));
        assert!(ParameterKey::new("", "mnl").is_err());
        assert!(ParameterKey::new("../etc", "mnl").is_err());
    }

    #[test]
    fn catalog_ingest_valid_and_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(
            dir.path(),
            "a.csv",
            "product_id,name,price\n1,milk,10\n2,\"bread, white\",8.5\n",
        );
        let c = ingest_catalog(&ok, "d").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get(ProductId(2)).unwrap().name, "bread, white");

        let bad = write(
            dir.path(),
            "b.csv",
            "product_id,name,price\n1,milk,10\n2,bread,0\n1,dup,3\n",
        );
        match ingest_catalog(&bad, "d") {
            Err(IngestError::Rows { rows, .. }) => {
                let lines: Vec<u64> = rows.iter().map(|r| r.line).collect();
                assert_eq!(lines, vec![3, 4]);
                assert!(rows[0].message.contains("not positive"));
                assert!(rows[1].message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }

        let header = write(dir.path(), "c.csv", "id,name,price\n1,milk,10\n");
        assert!(matches!(
            ingest_catalog(&header, "d"),
            Err(IngestError::Header { .. })
        ));
        assert!(matches!(
            ingest_catalog(&dir.path().join("missing.csv"), "d"),
            Err(IngestError::Io { .. })
        ));
    }

    #[test]
    fn transactions_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = two_product_catalog("d");
        let body = "TRANSACTION_DT;CUSTOMER_ID;AGE_GROUP;PIN_CODE;PRODUCT_SUBCLASS;PRODUCT_ID;AMOUNT;ASSET;SALES_PRICE\n\
                    11/1/2000;01104905;45-49;115;110411;1;1;24;30\n\
                    2000-11-02;00418683;45-49;115;120107;2;3;48;46\n\
                    2000-11-02;00418683;45-49;115;120107;99;1;48;46\n\
                    not-a-date;1;a;b;c;1;1;1;1\n";
        let p = write(dir.path(), "t.csv", body);
        let (records, report) = ingest_transactions(&p, &catalog).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(report.rows, 4);
        assert_eq!(report.valid_count, 2);
        assert_eq!(report.skipped_unknown_product, 1);
        assert_eq!(report.skipped_malformed, 1);
        assert_eq!(report.skipped_count + report.valid_count, report.rows);
        assert_eq!(report.distinct_users, 2);
        assert_eq!(records[1].quantity, 3);
        assert_eq!(
            records[0].date,
            NaiveDate::from_ymd_opt(2000, 11, 1).unwrap()
        );

        let comma = write(
            dir.path(),
            "t2.csv",
            "transaction_date,customer_id,age_group,pin_code,product_subclass,product_id,amount,asset,sales_price\n2001-01-05,u1,,,,7,1,1,1\n",
        );
        let (records, report) = ingest_transactions(&comma, &catalog).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.skipped_count, 1);

        let empty = write(dir.path(), "t3.csv", "");
        let (records, report) = ingest_transactions(&empty, &catalog).unwrap();
        assert!(records.is_empty());
        assert_eq!(report, IngestReport::default());
    }

    #[test]
    fn parameters_ingest_drops_zero_and_requires_v0() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.csv",
            "dataset,model,product_id,utility\nd,mnl,0,1\nd,mnl,1,0.5\nd,mnl,2,0\n",
        );
        let parsed = ingest_parameters(&p).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].dropped, vec![ProductId(2)]);
        assert_eq!(parsed[0].params.utilities().len(), 1);

        let no_v0 = write(
            dir.path(),
            "q.csv",
            "dataset,model,product_id,utility\nd,mnl,1,0.5\n",
        );
        assert!(matches!(
            ingest_parameters(&no_v0),
            Err(IngestError::Rows { .. })
        ));
        let range = write(
            dir.path(),
            "r.csv",
            "dataset,model,product_id,utility\nd,mnl,0,1\nd,mnl,1,1.5\n",
        );
        assert!(matches!(
            ingest_parameters(&range),
            Err(IngestError::Rows { .. })
        ));
    }

    #[test]
    fn put_get_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let key = ParameterKey::new("ta-feng", "mnl").unwrap();
        let original = params("ta-feng", "mnl");
        {
            let store = Store::open(dir.path()).unwrap();
            store
                .put_catalog(two_product_catalog("ta-feng"), "memory")
                .unwrap();
            store.put_parameters(&key, original.clone()).unwrap();
            assert_eq!(*store.get_parameters(&key).unwrap(), original);
        }
        let reopened = Store::open(dir.path()).unwrap();
        let loaded = reopened.get_parameters(&key).unwrap();
        assert_eq!(loaded.v0().to_bits(), original.v0().to_bits());
        for (id, v) in original.utilities() {
            assert_eq!(loaded.utility(*id).unwrap().to_bits(), v.to_bits());
        }
        let log = fs::read_to_string(dir.path().join("ingest.log")).unwrap();
        assert_eq!(log.lines().count(), 2);
    }

    #[test]
    fn lookup_errors_name_the_failing_part() {
        let store = Store::in_memory();
        store
            .put_catalog(two_product_catalog("ta-feng"), "memory")
            .unwrap();
        store
            .put_parameters(
                &ParameterKey::new("ta-feng", "mnl").unwrap(),
                params("x", "y"),
            )
            .unwrap();
        match store.get_parameters(&ParameterKey::new("nonexistent", "mnl").unwrap()) {
            Err(StoreError::UnknownDataset { available, .. }) => {
                assert_eq!(available, vec!["ta-feng"])
            }
            other => panic!("{other:?}"),
        }
        match store.get_parameters(&ParameterKey::new("ta-feng", "nested-logit").unwrap()) {
            Err(e @ StoreError::UnknownModel { .. }) => {
                assert!(e.to_string().contains("available: mnl"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn put_rejects_foreign_products() {
        let store = Store::in_memory();
        store
            .put_catalog(two_product_catalog("d"), "memory")
            .unwrap();
        let foreign =
            MnlParameters::new("d", "mnl", 1.0, [(ProductId(9), 0.5)].into_iter().collect())
                .unwrap();
        assert!(matches!(
            store.put_parameters(&ParameterKey::new("d", "mnl").unwrap(), foreign),
            Err(StoreError::InvalidParameters(_))
        ));
    }

    #[test]
    fn partial_parameters_restrict_the_universe() {
        let store = Store::in_memory();
        store
            .put_catalog(two_product_catalog("d"), "memory")
            .unwrap();
        let key = ParameterKey::new("d", "mnl").unwrap();
        let partial =
            MnlParameters::new("d", "mnl", 1.0, [(ProductId(1), 0.5)].into_iter().collect())
                .unwrap();
        store.put_parameters(&key, partial).unwrap();
        let (catalog, params) = store.resolve(&key).unwrap();
        assert_eq!(catalog.len(), 1);
        params.validate_against(&catalog).unwrap();
    }

    #[test]
    fn listing_is_sorted() {
        let store = Store::in_memory();
        assert!(store.list_datasets().is_empty());
        store
            .put_catalog(two_product_catalog("zeta"), "z.csv")
            .unwrap();
        store
            .put_catalog(two_product_catalog("alpha"), "a.csv")
            .unwrap();
        store
            .put_parameters(
                &ParameterKey::new("alpha", "mnl").unwrap(),
                params("alpha", "mnl"),
            )
            .unwrap();
        let list = store.list_datasets();
        let ids: Vec<_> = list.iter().map(|d| d.dataset_id.as_str()).collect();
        assert_eq!(ids, vec!["alpha", "zeta"]);
        assert_eq!(
            list[0].available_models,
            BTreeSet::from(["mnl".to_string()])
        );
        assert_eq!(list[0].product_count, 2);
        assert!(list[1].available_models.is_empty());
    }

    #[test]
    fn observations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let obs = vec![
            OfferSetObservation {
                offered: Assortment::from_iter([1u64, 2]),
                chosen: ProductId(2),
            },
            OfferSetObservation {
                offered: Assortment::from_iter([3u64]),
                chosen: ProductId(0),
            },
        ];
        write_observations(&path, &obs).unwrap();
        assert_eq!(read_observations(&path).unwrap(), obs);
        let bad = write(dir.path(), "bad.csv", "offered,chosen\n1 2,5\n");
        assert!(matches!(
            read_observations(&bad),
            Err(IngestError::Rows { .. })
        ));
    }

    #[test]
    fn transactions_persist() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store
            .put_catalog(two_product_catalog("d"), "memory")
            .unwrap();
        let rec = TransactionRecord {
            date: NaiveDate::from_ymd_opt(2001, 2, 3).unwrap(),
            user_id: "00418683".into(),
            product_id: ProductId(2),
            quantity: 4,
        };
        store
            .put_transactions("d", std::slice::from_ref(&rec))
            .unwrap();
        assert_eq!(store.transactions("d").unwrap(), vec![rec]);
    }
}
