//! Interaction logs, dense indexing, the leave-one-out split and negative
//! sampling.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::SeededRng;

/// Number of sampled negatives each held-out item is ranked against.
pub const EVAL_NEGATIVES: usize = 99;

/// Field separator of an interaction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineFormat {
    /// `user\titem\trating\ttimestamp`
    Tab,
    /// `user::item::rating::timestamp` (MovieLens `ratings.dat`)
    DoubleColon,
}

impl LineFormat {
    fn separator(self) -> &'static str {
        match self {
            LineFormat::Tab => "\t",
            LineFormat::DoubleColon => "::",
        }
    }
}

impl FromStr for LineFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab" | "tsv" => Ok(LineFormat::Tab),
            "double_colon" | "double-colon" | "::" | "dat" => Ok(LineFormat::DoubleColon),
            other => Err(Error::Invalid(format!(
                "unknown interaction format {other:?} (expected \"tab\" or \"double_colon\")"
            ))),
        }
    }
}

/// One raw log line.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    /// Carried through but not used by any model: every observed pair counts
    /// as a positive.
    pub rating: f64,
    pub timestamp: i64,
}

impl Interaction {
    pub fn parse_line(line: &str, format: LineFormat, line_no: usize) -> Result<Interaction> {
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(format.separator()).map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 fields separated by {:?}, found {}",
                format.separator(),
                fields.len()
            )));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let rating: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("invalid rating {:?}", fields[2])))?;
        let timestamp: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("invalid timestamp {:?}", fields[3])))?;
        if timestamp < 0 {
            return Err(parse_err(format!("negative timestamp {timestamp}")));
        }
        Ok(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub item: usize,
    pub timestamp: i64,
    pub rating: f64,
}

/// Users and items mapped to contiguous indices, with one history per user.
///
/// Histories are sorted by `(timestamp, item)` and contain each item at most
/// once.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    histories: Vec<Vec<HistoryEntry>>,
    item_sets: Vec<Vec<usize>>,
    raw_interactions: usize,
}

impl InteractionDataset {
    /// Builds a dataset from already-indexed histories. Duplicate items within
    /// a history keep the latest timestamp.
    pub fn from_histories(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        histories: Vec<Vec<HistoryEntry>>,
    ) -> Result<Self> {
        if user_ids.len() != histories.len() {
            return Err(Error::Shape(format!(
                "{} user ids for {} histories",
                user_ids.len(),
                histories.len()
            )));
        }
        let num_items = item_ids.len();
        let raw_interactions = histories.iter().map(Vec::len).sum();
        let mut cleaned = Vec::with_capacity(histories.len());
        for history in histories {
            let mut latest: HashMap<usize, HistoryEntry> = HashMap::with_capacity(history.len());
            for entry in history {
                if entry.item >= num_items {
                    return Err(Error::UnknownIndex {
                        kind: "item",
                        index: entry.item,
                        bound: num_items,
                    });
                }
                match latest.get(&entry.item) {
                    Some(prev) if prev.timestamp > entry.timestamp => {}
                    _ => {
                        latest.insert(entry.item, entry);
                    }
                }
            }
            let mut entries: Vec<HistoryEntry> = latest.into_values().collect();
            entries.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.item.cmp(&b.item)));
            cleaned.push(entries);
        }
        let item_sets = cleaned
            .iter()
            .map(|h| {
                let mut items: Vec<usize> = h.iter().map(|e| e.item).collect();
                items.sort_unstable();
                items
            })
            .collect();
        let user_index = index_of(&user_ids)?;
        let item_index = index_of(&item_ids)?;
        Ok(InteractionDataset {
            user_ids,
            item_ids,
            user_index,
            item_index,
            histories: cleaned,
            item_sets,
            raw_interactions,
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Distinct (user, item) pairs.
    pub fn num_interactions(&self) -> usize {
        self.histories.iter().map(Vec::len).sum()
    }

    /// Lines ingested before duplicate collapsing.
    pub fn raw_interactions(&self) -> usize {
        self.raw_interactions
    }

    pub fn history(&self, user: usize) -> &[HistoryEntry] {
        &self.histories[user]
    }

    /// Items of `user`, ascending.
    pub fn items(&self, user: usize) -> &[usize] {
        &self.item_sets[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.item_sets[user].binary_search(&item).is_ok()
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.user_ids[user]
    }

    pub fn item_id(&self, item: usize) -> &str {
        &self.item_ids[item]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.user_index.get(raw).copied()
    }

    pub fn item_index(&self, raw: &str) -> Option<usize> {
        self.item_index.get(raw).copied()
    }

    /// Users whose history is shorter than `min_len`.
    pub fn users_below(&self, min_len: usize) -> Vec<usize> {
        (0..self.num_users())
            .filter(|&u| self.histories[u].len() < min_len)
            .collect()
    }

    /// Number of users that interacted with each item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items()];
        for items in &self.item_sets {
            for &i in items {
                counts[i] += 1;
            }
        }
        counts
    }
}

fn index_of(ids: &[String]) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::Invalid(format!("duplicate id {id:?}")));
        }
    }
    Ok(map)
}

/// Reads an interaction log. Indices are assigned in order of first
/// appearance; blank lines are skipped.
pub fn parse_interactions<R: BufRead>(reader: R, format: LineFormat) -> Result<InteractionDataset> {
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut histories: Vec<Vec<HistoryEntry>> = Vec::new();

    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rec = Interaction::parse_line(line, format, n + 1)?;
        let u = *user_index.entry(rec.user.clone()).or_insert_with(|| {
            user_ids.push(rec.user.clone());
            histories.push(Vec::new());
            user_ids.len() - 1
        });
        let i = *item_index.entry(rec.item.clone()).or_insert_with(|| {
            item_ids.push(rec.item.clone());
            item_ids.len() - 1
        });
        histories[u].push(HistoryEntry {
            item: i,
            timestamp: rec.timestamp,
            rating: rec.rating,
        });
    }
    if histories.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dataset = InteractionDataset::from_histories(user_ids, item_ids, histories)?;
    let short = dataset.users_below(2).len();
    info!(
        "parsed {} interactions ({} distinct) from {} users and {} items; {} users have fewer than 2 interactions",
        dataset.raw_interactions(),
        dataset.num_interactions(),
        dataset.num_users(),
        dataset.num_items(),
        short
    );
    Ok(dataset)
}

pub fn read_interactions(path: &Path, format: LineFormat) -> Result<InteractionDataset> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    parse_interactions(BufReader::new(file), format)
}

/// Training data plus, per user, the held-out latest item and the fixed
/// evaluation negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LooSplit {
    pub train: InteractionDataset,
    pub test_items: Vec<usize>,
    pub eval_negatives: Vec<Vec<usize>>,
    pub seed: u64,
    /// Users removed because they had fewer than two interactions.
    pub dropped_users: usize,
}

impl LooSplit {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }
}

/// Holds out each user's latest interaction and samples
/// [`EVAL_NEGATIVES`] evaluation negatives per user.
pub fn leave_one_out_split(dataset: &InteractionDataset, seed: u64) -> Result<LooSplit> {
    leave_one_out_split_with(dataset, seed, Some(EVAL_NEGATIVES))
}

/// Like [`leave_one_out_split`], with a custom negative count. `None` takes
/// every item the user never interacted with, which is how tiny synthetic
/// catalogues are evaluated.
///
/// Ties on the latest timestamp go to the larger item index.
pub fn leave_one_out_split_with(
    dataset: &InteractionDataset,
    seed: u64,
    num_negatives: Option<usize>,
) -> Result<LooSplit> {
    let root = SeededRng::new(seed);
    let keep: Vec<usize> = (0..dataset.num_users())
        .filter(|&u| dataset.history(u).len() >= 2)
        .collect();
    let dropped_users = dataset.num_users() - keep.len();
    if dropped_users > 0 {
        info!("dropped {dropped_users} users with fewer than 2 interactions");
    }
    if keep.is_empty() {
        return Err(Error::Invalid("no user has at least 2 interactions".into()));
    }

    let num_items = dataset.num_items();
    let mut user_ids = Vec::with_capacity(keep.len());
    let mut histories = Vec::with_capacity(keep.len());
    let mut test_items = Vec::with_capacity(keep.len());
    let mut eval_negatives = Vec::with_capacity(keep.len());

    for &u in &keep {
        let history = dataset.history(u);
        // sorted by (timestamp, item), so the last entry is the latest with
        // the larger item index winning ties
        let held_out = history[history.len() - 1];
        let train: Vec<HistoryEntry> = history[..history.len() - 1].to_vec();

        let seen = dataset.items(u);
        let pool: Vec<usize> = (0..num_items)
            .filter(|i| seen.binary_search(i).is_err())
            .collect();
        let wanted = num_negatives.unwrap_or(pool.len());
        if pool.len() < wanted {
            return Err(Error::NegativePoolTooSmall {
                user: dataset.user_id(u).to_string(),
                available: pool.len(),
                required: wanted,
            });
        }
        let mut rng = root.substream_indexed("eval-negatives", u as u64);
        let negatives: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), wanted)
            .into_iter()
            .map(|k| pool[k])
            .collect();

        user_ids.push(dataset.user_id(u).to_string());
        histories.push(train);
        test_items.push(held_out.item);
        eval_negatives.push(negatives);
    }

    let train = InteractionDataset::from_histories(user_ids, dataset.item_ids().to_vec(), histories)?;
    Ok(LooSplit {
        train,
        test_items,
        eval_negatives,
        seed,
        dropped_users,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainInstance {
    pub user: usize,
    pub item: usize,
    pub label: u8,
}

/// Every training positive followed by `num_negatives` sampled negatives, in
/// shuffled order.
///
/// Negatives are drawn uniformly from the catalogue and rejected while they
/// fall inside the user's training history. After `100 · num_negatives`
/// rejected draws for one positive the remaining negatives come from the
/// explicit list of non-interacted items.
pub fn sample_train_instances<R: Rng + ?Sized>(
    split: &LooSplit,
    num_negatives: usize,
    rng: &mut R,
) -> Result<Vec<TrainInstance>> {
    let train = &split.train;
    let num_items = train.num_items();
    let mut out = Vec::with_capacity(train.num_interactions() * (1 + num_negatives));
    let max_attempts = 100 * num_negatives;

    for user in 0..train.num_users() {
        let seen = train.items(user);
        let mut fallback: Option<Vec<usize>> = None;
        for entry in train.history(user) {
            out.push(TrainInstance {
                user,
                item: entry.item,
                label: 1,
            });
            if num_negatives == 0 {
                continue;
            }
            if seen.len() >= num_items {
                return Err(Error::Invalid(format!(
                    "user {} interacted with every item; no negatives can be sampled",
                    train.user_id(user)
                )));
            }
            let mut drawn = 0;
            let mut attempts = 0;
            while drawn < num_negatives && attempts < max_attempts {
                attempts += 1;
                let j = rng.random_range(0..num_items);
                if seen.binary_search(&j).is_err() {
                    out.push(TrainInstance {
                        user,
                        item: j,
                        label: 0,
                    });
                    drawn += 1;
                }
            }
            if drawn < num_negatives {
                let pool = fallback.get_or_insert_with(|| {
                    (0..num_items)
                        .filter(|i| seen.binary_search(i).is_err())
                        .collect()
                });
                for _ in drawn..num_negatives {
                    let j = pool[rng.random_range(0..pool.len())];
                    out.push(TrainInstance {
                        user,
                        item: j,
                        label: 0,
                    });
                }
            }
        }
    }
    out.shuffle(rng);
    Ok(out)
}

fn prefixed(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(BufWriter::new(file))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(BufReader::new(file))
}

/// Writes `<prefix>.train`, `.test`, `.negatives` and `.idmap`, all in
/// dense-index space.
pub fn write_split(split: &LooSplit, prefix: &Path) -> Result<()> {
    let train = &split.train;

    let mut w = create(&prefixed(prefix, "train"))?;
    for u in 0..train.num_users() {
        for e in train.history(u) {
            writeln!(w, "{u}\t{}\t{}\t{}", e.item, e.rating, e.timestamp)?;
        }
    }
    w.flush()?;

    let mut w = create(&prefixed(prefix, "test"))?;
    for (u, item) in split.test_items.iter().enumerate() {
        writeln!(w, "{u}\t{item}")?;
    }
    w.flush()?;

    let mut w = create(&prefixed(prefix, "negatives"))?;
    for (u, negs) in split.eval_negatives.iter().enumerate() {
        write!(w, "{u}")?;
        for n in negs {
            write!(w, "\t{n}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;

    let mut w = create(&prefixed(prefix, "idmap"))?;
    writeln!(w, "#users")?;
    for (u, id) in train.user_ids().iter().enumerate() {
        writeln!(w, "{id}\t{u}")?;
    }
    writeln!(w, "#items")?;
    for (i, id) in train.item_ids().iter().enumerate() {
        writeln!(w, "{id}\t{i}")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_index(field: &str, line: usize, what: &str) -> Result<usize> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} index {field:?}"),
    })
}

/// Reads the files produced by [`write_split`].
pub fn read_split(prefix: &Path, seed: u64) -> Result<LooSplit> {
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut section = None;
    for (n, line) in open(&prefixed(prefix, "idmap"))?.lines().enumerate() {
        let line = line?;
        match line.as_str() {
            "#users" => section = Some(&mut user_ids),
            "#items" => section = Some(&mut item_ids),
            "" => {}
            _ => {
                let (raw, idx) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                    line: n + 1,
                    message: "expected raw_id<TAB>index".into(),
                })?;
                let idx = parse_index(idx, n + 1, "dense")?;
                let ids = section.as_mut().ok_or_else(|| Error::Parse {
                    line: n + 1,
                    message: "entry before #users/#items header".into(),
                })?;
                if idx != ids.len() {
                    return Err(Error::Parse {
                        line: n + 1,
                        message: format!("expected dense index {}, found {idx}", ids.len()),
                    });
                }
                ids.push(raw.to_string());
            }
        }
    }
    let num_users = user_ids.len();

    let mut histories = vec![Vec::new(); num_users];
    for (n, line) in open(&prefixed(prefix, "train"))?.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = Interaction::parse_line(&line, LineFormat::Tab, n + 1)?;
        let u = parse_index(&rec.user, n + 1, "user")?;
        let i = parse_index(&rec.item, n + 1, "item")?;
        if u >= num_users {
            return Err(Error::UnknownIndex {
                kind: "user",
                index: u,
                bound: num_users,
            });
        }
        histories[u].push(HistoryEntry {
            item: i,
            timestamp: rec.timestamp,
            rating: rec.rating,
        });
    }
    let train = InteractionDataset::from_histories(user_ids, item_ids, histories)?;

    let read_per_user = |ext: &str| -> Result<Vec<Vec<usize>>> {
        let mut rows = vec![None; num_users];
        for (n, line) in open(&prefixed(prefix, ext))?.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let u = parse_index(fields.next().unwrap_or(""), n + 1, "user")?;
            if u >= num_users {
                return Err(Error::UnknownIndex {
                    kind: "user",
                    index: u,
                    bound: num_users,
                });
            }
            let items = fields
                .map(|f| parse_index(f, n + 1, "item"))
                .collect::<Result<Vec<_>>>()?;
            rows[u] = Some(items);
        }
        rows.into_iter()
            .enumerate()
            .map(|(u, r)| {
                r.ok_or_else(|| Error::Invalid(format!("{ext} file has no line for user {u}")))
            })
            .collect()
    };

    let test_items = read_per_user("test")?
        .into_iter()
        .enumerate()
        .map(|(u, items)| match items.as_slice() {
            [item] => Ok(*item),
            _ => Err(Error::Invalid(format!("test file: user {u} must have exactly one item"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let eval_negatives = read_per_user("negatives")?;

    let num_items = train.num_items();
    for (u, negs) in eval_negatives.iter().enumerate() {
        for &i in negs.iter().chain(std::iter::once(&test_items[u])) {
            if i >= num_items {
                return Err(Error::UnknownIndex {
                    kind: "item",
                    index: i,
                    bound: num_items,
                });
            }
        }
    }

    Ok(LooSplit {
        train,
        test_items,
        eval_negatives,
        seed,
        dropped_users: 0,
    })
}
