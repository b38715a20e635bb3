//! Result tables and accuracy curves built from a directory of finished
//! downstream runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dataset::write_atomic;
use crate::downstream::{AugmentLevel, Mode, RunResult};
use crate::error::{Error, Result};
use crate::experiment::collect_results;
use crate::geometry::SetName;
use crate::models::{Arch, BackboneSpec};
use crate::nn::OptimizerKind;

pub const TABLES_MARKDOWN: &str = "tables.md";
pub const CURVES_CSV: &str = "curves.csv";
const MISSING: &str = "—";

/// Row order of the results tables.
const ARCH_ORDER: [Arch; 5] = [Arch::Resnet50, Arch::Densenet201, Arch::Vgg16, Arch::Nin, Arch::Resnet152v2];

fn arch_rank(arch: Arch) -> usize {
    ARCH_ORDER.iter().position(|a| *a == arch).unwrap_or(ARCH_ORDER.len())
}

fn spec_key(spec: &BackboneSpec) -> (usize, usize, usize) {
    (arch_rank(spec.arch), spec.num_blocks, spec.width_divisor)
}

/// Formats an accuracy with at most four decimals and no trailing zeros.
pub fn format_accuracy(acc: f64) -> String {
    let s = format!("{acc:.4}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

/// One filled table cell and the run it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub accuracy: f64,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub bold: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    /// Spanning header, e.g. `Rotation - 2`.
    pub group: String,
    /// Leaf header, e.g. `Unfrozen`.
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowGroup {
    /// Empty for tables without visible grouping.
    pub label: String,
    pub rows: Vec<String>,
}

/// Accuracy table: rows grouped for bolding, one cell per (row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub slug: String,
    pub title: String,
    pub row_header: String,
    pub columns: Vec<Column>,
    pub groups: Vec<RowGroup>,
    cells: BTreeMap<(String, usize), Cell>,
    duplicates: Vec<String>,
}

impl ResultsTable {
    fn new(slug: impl Into<String>, title: impl Into<String>, row_header: impl Into<String>) -> Self {
        Self {
            slug: slug.into(),
            title: title.into(),
            row_header: row_header.into(),
            columns: Vec::new(),
            groups: Vec::new(),
            cells: BTreeMap::new(),
            duplicates: Vec::new(),
        }
    }

    pub fn cell(&self, row: &str, column: usize) -> Option<&Cell> {
        self.cells.get(&(row.to_string(), column))
    }

    pub fn column_index(&self, group: &str, label: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.group == group && c.label == label)
    }

    pub fn rows(&self) -> impl Iterator<Item = &String> {
        self.groups.iter().flat_map(|g| g.rows.iter())
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Bolds the maximum of every column within every row group. Ties are
    /// all bolded.
    fn apply_bolding(&mut self) {
        for group in &self.groups {
            for col in 0..self.columns.len() {
                let best = group
                    .rows
                    .iter()
                    .filter_map(|r| self.cells.get(&(r.clone(), col)))
                    .map(|c| c.accuracy)
                    .fold(f64::NEG_INFINITY, f64::max);
                for r in &group.rows {
                    if let Some(c) = self.cells.get_mut(&(r.clone(), col)) {
                        c.bold = c.accuracy == best;
                    }
                }
            }
        }
    }

    fn render_cell(&self, row: &str, col: usize) -> String {
        match self.cell(row, col) {
            Some(c) if c.bold => format!("**{}**", format_accuracy(c.accuracy)),
            Some(c) => format_accuracy(c.accuracy),
            None => MISSING.to_string(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n", self.title);
        let headers: Vec<String> = self
            .columns
            .iter()
            .map(|c| if c.group.is_empty() { c.label.clone() } else { format!("{} / {}", c.group, c.label) })
            .collect();
        let _ = writeln!(out, "| {} | {} |", self.row_header, headers.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(self.columns.len()));
        let grouped = self.groups.len() > 1;
        for group in &self.groups {
            if grouped && !group.label.is_empty() {
                let _ = writeln!(out, "| *{}* |{}", group.label, " |".repeat(self.columns.len()));
            }
            for row in &group.rows {
                let cells: Vec<String> = (0..self.columns.len()).map(|c| self.render_cell(row, c)).collect();
                let _ = writeln!(out, "| {} | {} |", row, cells.join(" | "));
            }
        }
        out
    }

    /// Long-format CSV: one line per cell, missing cells included.
    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            group: &'a str,
            row: &'a str,
            column_group: &'a str,
            column: &'a str,
            accuracy: Option<f64>,
            bold: bool,
            config_hash: &'a str,
            run_dir: String,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for group in &self.groups {
            for row in &group.rows {
                for (i, col) in self.columns.iter().enumerate() {
                    let cell = self.cell(row, i);
                    w.serialize(Line {
                        group: &group.label,
                        row,
                        column_group: &col.group,
                        column: &col.label,
                        accuracy: cell.map(|c| c.accuracy),
                        bold: cell.is_some_and(|c| c.bold),
                        config_hash: cell.map_or("", |c| c.config_hash.as_str()),
                        run_dir: cell.map_or(String::new(), |c| c.run_dir.display().to_string()),
                    })
                    .map_err(|e| Error::invalid(e.to_string()))?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }
}

/// Everything `emit_table` produced.
#[derive(Clone, Debug, Default)]
pub struct TableReport {
    pub tables: Vec<ResultsTable>,
    pub warnings: Vec<String>,
    pub markdown: String,
}

impl TableReport {
    pub fn table(&self, slug: &str) -> Option<&ResultsTable> {
        self.tables.iter().find(|t| t.slug == slug)
    }
}

impl ResultsTable {
    fn put(&mut self, group: &str, row: String, column: Column, dir: &Path, r: &RunResult) {
        let col = match self.columns.iter().position(|c| *c == column) {
            Some(i) => i,
            None => {
                self.columns.push(column);
                self.columns.len() - 1
            }
        };
        let g = match self.groups.iter().position(|g| g.label == group) {
            Some(i) => i,
            None => {
                self.groups.push(RowGroup {
                    label: group.to_string(),
                    rows: Vec::new(),
                });
                self.groups.len() - 1
            }
        };
        if !self.groups[g].rows.contains(&row) {
            self.groups[g].rows.push(row.clone());
        }
        let key = (row, col);
        if let Some(existing) = self.cells.get(&key) {
            self.duplicates.push(format!(
                "{}: {} / {} {} is also produced by {}; keeping {}",
                self.title,
                key.0,
                self.columns[col].group,
                self.columns[col].label,
                dir.display(),
                existing.run_dir.display()
            ));
            return;
        }
        self.cells.insert(
            key,
            Cell {
                accuracy: r.final_test_accuracy,
                config_hash: r.config_hash.clone(),
                run_dir: dir.to_path_buf(),
                bold: false,
            },
        );
    }
}

fn mode_column(group: String, mode: Mode) -> Column {
    Column {
        group,
        label: mode.label().to_string(),
    }
}

fn short_set_label(set: SetName) -> String {
    match set.expected_k() {
        Some(k) if set.is_rotation() => format!("Rot-{k}"),
        Some(k) => format!("Transform-{k}"),
        None => set.as_str().to_string(),
    }
}

/// Lays results out as the standard set of tables. Results with
/// non-default augmentation or optimizer only appear in the ablation
/// tables.
pub fn build_tables(results: &[(PathBuf, RunResult)]) -> (Vec<ResultsTable>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut sorted: Vec<&(PathBuf, RunResult)> = results.iter().collect();
    sorted.sort_by(|a, b| {
        let (ra, rb) = (&a.1, &b.1);
        spec_key(&ra.backbone)
            .cmp(&spec_key(&rb.backbone))
            .then(ra.transform_set.cmp(&rb.transform_set))
            .then(Mode::ALL.iter().position(|m| *m == ra.config.mode).cmp(&Mode::ALL.iter().position(|m| *m == rb.config.mode)))
            .then(ra.config.seed.cmp(&rb.config.seed))
            .then(a.0.cmp(&b.0))
    });

    let default_aug = AugmentLevel::None;
    let default_opt = OptimizerKind::Rmsprop;
    let mut rotation = ResultsTable::new("rotation", "Rotation prediction", "Model - block");
    let mut affine = ResultsTable::new("affine", "Affine transformation prediction", "Model - block");
    let mut control = ResultsTable::new("random-init", "Random-init backbone control", "Model - block");
    let mut aug: BTreeMap<(usize, usize, usize), ResultsTable> = BTreeMap::new();
    let mut opt: BTreeMap<(usize, usize, usize), ResultsTable> = BTreeMap::new();

    for (dir, r) in &sorted {
        let spec = &r.backbone;
        let row = spec.label();
        let cfg = &r.config;
        let is_default = cfg.augmentation == default_aug && cfg.optimizer == default_opt;
        match r.transform_set {
            None => {
                if is_default {
                    control.put(
                        "",
                        row,
                        mode_column(String::new(), cfg.mode),
                        dir,
                        r,
                    );
                }
            }
            Some(set) => {
                if is_default {
                    let (table, group) = if set.is_rotation() {
                        (&mut rotation, String::new())
                    } else {
                        let g = format!("{} block{}", spec.num_blocks, if spec.num_blocks == 1 { "" } else { "s" });
                        (&mut affine, g)
                    };
                    table.put(&group, row.clone(), mode_column(set.label(), cfg.mode), dir, r);
                }
                if set.is_rotation() {
                    let key = spec_key(spec);
                    let column = Column {
                        group: cfg.mode.label().to_string(),
                        label: short_set_label(set),
                    };
                    if cfg.optimizer == default_opt {
                        let t = aug.entry(key).or_insert_with(|| {
                            ResultsTable::new(
                                format!("augmentation-{spec}").replace('/', "-"),
                                format!("Effect of data augmentation, {}", spec.label()),
                                "Augmentation",
                            )
                        });
                        t.put(
                            "",
                            cfg.augmentation.label().to_string(),
                            column.clone(),
                            dir,
                            r,
                        );
                    }
                    if cfg.augmentation == default_aug {
                        let t = opt.entry(key).or_insert_with(|| {
                            ResultsTable::new(
                                format!("optimizer-{spec}").replace('/', "-"),
                                format!("Optimizer comparison, {}", spec.label()),
                                "Optimizer",
                            )
                        });
                        t.put(
                            "",
                            cfg.optimizer.label().to_string(),
                            column,
                            dir,
                            r,
                        );
                    }
                }
            }
        }
    }

    // Affine groups by block count, rows in architecture order within.
    affine.groups.sort_by_key(|g| g.label.split(' ').next().and_then(|n| n.parse::<usize>().ok()).unwrap_or(0));
    sort_columns(&mut rotation);
    sort_columns(&mut affine);

    let mut tables = Vec::new();
    for t in [rotation, affine] {
        if t.cell_count() > 0 {
            tables.push(t);
        }
    }
    for t in aug.into_values() {
        if t.groups.iter().map(|g| g.rows.len()).sum::<usize>() > 1 {
            tables.push(order_ablation(t, &["Strong", "Weak", "None"]));
        }
    }
    for t in opt.into_values() {
        if t.groups.iter().map(|g| g.rows.len()).sum::<usize>() > 1 {
            tables.push(order_ablation(t, &["SGD", "RMSprop", "Adam"]));
        }
    }
    if control.cell_count() > 0 {
        tables.push(control);
    }
    for t in &mut tables {
        warnings.append(&mut t.duplicates);
        t.apply_bolding();
    }
    (tables, warnings)
}

/// Reorders columns by (set, mode) while keeping cells attached.
fn sort_columns(table: &mut ResultsTable) {
    let mut order: Vec<usize> = (0..table.columns.len()).collect();
    let mode_rank = |label: &str| Mode::ALL.iter().position(|m| m.label() == label).unwrap_or(2);
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&table.columns[a], &table.columns[b]);
        trailing_number(&ca.group)
            .cmp(&trailing_number(&cb.group))
            .then(mode_rank(&ca.label).cmp(&mode_rank(&cb.label)))
    });
    permute_columns(table, &order);
}

fn trailing_number(label: &str) -> usize {
    label.rsplit(['-', ' ']).next().and_then(|n| n.parse().ok()).unwrap_or(usize::MAX)
}

fn permute_columns(table: &mut ResultsTable, order: &[usize]) {
    let new_index: BTreeMap<usize, usize> = order.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    table.columns = order.iter().map(|&i| table.columns[i].clone()).collect();
    table.cells = std::mem::take(&mut table.cells)
        .into_iter()
        .map(|((row, col), cell)| ((row, new_index[&col]), cell))
        .collect();
}

fn order_ablation(mut table: ResultsTable, row_order: &[&str]) -> ResultsTable {
    for g in &mut table.groups {
        g.rows.sort_by_key(|r| row_order.iter().position(|o| o == r).unwrap_or(row_order.len()));
    }
    let mode_rank = |label: &str| Mode::ALL.iter().position(|m| m.label() == label).unwrap_or(2);
    let mut order: Vec<usize> = (0..table.columns.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&table.columns[a], &table.columns[b]);
        mode_rank(&ca.group)
            .cmp(&mode_rank(&cb.group))
            .then(trailing_number(&ca.label).cmp(&trailing_number(&cb.label)))
    });
    permute_columns(&mut table, &order);
    table
}

fn render_markdown(tables: &[ResultsTable], warnings: &[String]) -> String {
    let mut out = String::from("# Downstream classification accuracy\n\n");
    if tables.is_empty() {
        out.push_str("No results found.\n\n");
    }
    for t in tables {
        out.push_str(&t.to_markdown());
        out.push('\n');
    }
    if !warnings.is_empty() {
        out.push_str("## Warnings\n\n");
        for w in warnings {
            let _ = writeln!(out, "- {w}");
        }
    }
    out
}

/// Builds tables from every run below `results_dir` and writes
/// `tables.md` plus one `table-<slug>.csv` per table into `out_dir`.
pub fn emit_table(results_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<TableReport> {
    let (results, mut warnings) = collect_results(results_dir.as_ref());
    let (tables, placement_warnings) = build_tables(&results);
    warnings.extend(placement_warnings);
    let markdown = render_markdown(&tables, &warnings);
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(TABLES_MARKDOWN), markdown.as_bytes())?;
    for t in &tables {
        write_atomic(&out.join(format!("table-{}.csv", t.slug)), t.to_csv()?.as_bytes())?;
    }
    Ok(TableReport {
        tables,
        warnings,
        markdown,
    })
}

// ---------------------------------------------------------------------------
// Curves

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(usize, f64)>,
    pub dashed: bool,
}

/// Curves of runs that differ only in the downstream mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub slug: String,
    pub title: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug, Default)]
pub struct CurveReport {
    pub figures: Vec<Figure>,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn group_title(r: &RunResult) -> (String, String) {
    let set = r.transform_set.map_or("random init".to_string(), |s| s.label());
    let mut title = format!("{}, {}", r.backbone.label(), set);
    let mut slug = format!("{}_{}", r.backbone, r.transform_set.map_or("random-init", |s| s.as_str()));
    if r.config.augmentation != AugmentLevel::None {
        let _ = write!(title, ", {} augmentation", r.config.augmentation.as_str());
        let _ = write!(slug, "_{}", r.config.augmentation.as_str());
    }
    if r.config.optimizer != OptimizerKind::Rmsprop {
        let _ = write!(title, ", {}", r.config.optimizer.label());
        let _ = write!(slug, "_{}", r.config.optimizer.as_str());
    }
    let _ = write!(slug, "_s{}", r.config.seed);
    (slug.replace('/', "-"), title)
}

/// Groups runs into figures. Runs whose epochs are not strictly increasing
/// or that have no curve points are skipped with a warning.
pub fn build_figures(results: &[(PathBuf, RunResult)]) -> (Vec<Figure>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut groups: BTreeMap<String, (String, Vec<&RunResult>)> = BTreeMap::new();
    for (dir, r) in results {
        if r.curves.is_empty() {
            warnings.push(format!("{}: no per-epoch curve, skipped", dir.display()));
            continue;
        }
        if r.curves.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
            warnings.push(format!("{}: epochs are not strictly increasing, skipped", dir.display()));
            continue;
        }
        let (slug, title) = group_title(r);
        groups.entry(slug).or_insert_with(|| (title, Vec::new())).1.push(r);
    }
    let mut figures = Vec::new();
    for (slug, (title, mut runs)) in groups {
        runs.sort_by_key(|r| Mode::ALL.iter().position(|m| *m == r.config.mode));
        let mut series = Vec::new();
        for r in runs {
            let name = r.config.mode.curve_label();
            series.push(Series {
                label: format!("{name}, train"),
                points: r.curves.iter().map(|p| (p.epoch, p.train_accuracy)).collect(),
                dashed: true,
            });
            series.push(Series {
                label: format!("{name}, test"),
                points: r.curves.iter().map(|p| (p.epoch, p.test_accuracy)).collect(),
                dashed: false,
            });
        }
        figures.push(Figure { slug, title, series });
    }
    (figures, warnings)
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Figure {
    /// Accuracy against epoch as a standalone SVG document.
    pub fn to_svg(&self) -> String {
        let (w, h) = (640.0, 420.0);
        let (left, right, top, bottom) = (60.0, 200.0, 40.0, 50.0);
        let (pw, ph) = (w - left - right, h - top - bottom);
        let max_epoch = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        let x = |e: f64| left + e / max_epoch * pw;
        let y = |a: f64| top + (1.0 - a.clamp(0.0, 1.0)) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            left + pw / 2.0,
            xml_escape(&self.title)
        );
        for i in 0..=5 {
            let a = i as f64 / 5.0;
            let _ = writeln!(
                svg,
                r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{a:.1}</text>"##,
                left + pw,
                left - 6.0,
                y(a) + 4.0,
                y = y(a)
            );
        }
        let ticks = max_epoch as usize;
        let step = (ticks / 10).max(1);
        for e in (0..=ticks).step_by(step) {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{e}</text>"#,
                x(e as f64),
                top + ph + 18.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
            left + pw / 2.0,
            h - 12.0
        );
        let _ = writeln!(
            svg,
            r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">accuracy</text>"#,
            top + ph / 2.0
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[(i / 2) % PALETTE.len()];
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let pts: Vec<String> = s.points.iter().map(|&(e, a)| format!("{:.1},{:.1}", x(e as f64), y(a))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
                pts.join(" ")
            );
            let ly = top + 10.0 + i as f64 * 20.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
                left + pw + 12.0,
                left + pw + 40.0,
                left + pw + 46.0,
                ly + 4.0,
                xml_escape(&s.label)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Writes one `curves-<group>.svg` per figure and a combined long-format
/// `curves.csv` into `out_dir`.
pub fn emit_curves(results_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<CurveReport> {
    let (results, mut warnings) = collect_results(results_dir.as_ref());
    let (figures, more) = build_figures(&results);
    warnings.extend(more);
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["figure", "series", "epoch", "accuracy"]).map_err(|e| Error::invalid(e.to_string()))?;
    for f in &figures {
        let path = out.join(format!("curves-{}.svg", f.slug));
        write_atomic(&path, f.to_svg().as_bytes())?;
        files.push(path);
        for s in &f.series {
            for &(epoch, acc) in &s.points {
                w.write_record([f.slug.as_str(), s.label.as_str(), &epoch.to_string(), &acc.to_string()])
                    .map_err(|e| Error::invalid(e.to_string()))?;
            }
        }
    }
    let csv_path = out.join(CURVES_CSV);
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&csv_path, &bytes)?;
    files.push(csv_path);
    Ok(CurveReport {
        figures,
        files,
        warnings,
    })
}
