//! Voxel grid simulator for the block-building task.
//!
//! A [`WorldState`] is a value: [`WorldState::apply`] returns a new state and
//! leaves the receiver untouched. Cells are enumerated in `(y, z, x)` order
//! everywhere (serialization, rendering, action indices).

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorldError {
    #[error("cell ({x},{y},{z}) is outside the {dims} grid")]
    OutOfBounds { x: i64, y: i64, z: i64, dims: GridDims },
    #[error("cannot place at {0}: cell is occupied")]
    Occupied(Cell),
    #[error("cannot remove at {0}: cell is empty")]
    Empty(Cell),
    #[error("cannot place at {0}: not on the ground and not touching a block")]
    Ungrounded(Cell),
    #[error("grid dimensions differ: {0} vs {1}")]
    DimensionMismatch(GridDims, GridDims),
    #[error("grid dimensions must all be at least 1, got {0}")]
    InvalidDims(GridDims),
}

/// The six block colors of the building palette, in enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Orange,
    Yellow,
    Green,
    Blue,
    Purple,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Orange,
        Color::Yellow,
        Color::Green,
        Color::Blue,
        Color::Purple,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Color> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Orange => "orange",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Purple => "purple",
        }
    }

    pub fn from_name(name: &str) -> Option<Color> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Single-character glyph used by [`render_text`].
    pub fn initial(self) -> char {
        match self {
            Color::Red => 'R',
            Color::Orange => 'O',
            Color::Yellow => 'Y',
            Color::Green => 'G',
            Color::Blue => 'B',
            Color::Purple => 'P',
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub sx: usize,
    pub sy: usize,
    pub sz: usize,
}

impl GridDims {
    pub const fn new(sx: usize, sy: usize, sz: usize) -> Self {
        Self { sx, sy, sz }
    }

    pub fn validate(self) -> Result<Self, WorldError> {
        if self.sx == 0 || self.sy == 0 || self.sz == 0 {
            return Err(WorldError::InvalidDims(self));
        }
        Ok(self)
    }

    pub fn n_cells(self) -> usize {
        self.sx * self.sy * self.sz
    }

    pub fn contains(self, cell: Cell) -> bool {
        cell.x < self.sx && cell.y < self.sy && cell.z < self.sz
    }

    /// Position of `cell` in `(y, z, x)` enumeration order.
    pub fn index_of(self, cell: Cell) -> usize {
        (cell.y * self.sz + cell.z) * self.sx + cell.x
    }

    pub fn cell_at(self, index: usize) -> Cell {
        let x = index % self.sx;
        let rest = index / self.sx;
        Cell {
            x,
            y: rest / self.sz,
            z: rest % self.sz,
        }
    }

    /// Checks signed coordinates (as found in corpus files) against the grid.
    pub fn checked_cell(self, x: i64, y: i64, z: i64) -> Result<Cell, WorldError> {
        let fits = |v: i64, n: usize| v >= 0 && (v as u64) < n as u64;
        if fits(x, self.sx) && fits(y, self.sy) && fits(z, self.sz) {
            Ok(Cell::new(x as usize, y as usize, z as usize))
        } else {
            Err(WorldError::OutOfBounds { x, y, z, dims: self })
        }
    }

    pub fn cells(self) -> impl Iterator<Item = Cell> {
        (0..self.n_cells()).map(move |i| self.cell_at(i))
    }
}

impl Default for GridDims {
    fn default() -> Self {
        Self::new(11, 9, 11)
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.sx, self.sy, self.sz)
    }
}

/// A grid cell. Ordered by `(y, z, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    fn key(&self) -> (usize, usize, usize) {
        (self.y, self.z, self.x)
    }
}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.z)
    }
}

/// A grounded builder action. A removal never carries a color.
///
/// Ordering puts every removal before every placement, so iterating a
/// `BTreeSet<BlockAction>` yields a replayable sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockAction {
    Place { cell: Cell, color: Color },
    Remove { cell: Cell },
}

impl BlockAction {
    pub fn place(x: usize, y: usize, z: usize, color: Color) -> Self {
        BlockAction::Place {
            cell: Cell::new(x, y, z),
            color,
        }
    }

    pub fn remove(x: usize, y: usize, z: usize) -> Self {
        BlockAction::Remove {
            cell: Cell::new(x, y, z),
        }
    }

    pub fn cell(&self) -> Cell {
        match *self {
            BlockAction::Place { cell, .. } | BlockAction::Remove { cell } => cell,
        }
    }

    pub fn color(&self) -> Option<Color> {
        match *self {
            BlockAction::Place { color, .. } => Some(color),
            BlockAction::Remove { .. } => None,
        }
    }

    pub fn is_place(&self) -> bool {
        matches!(self, BlockAction::Place { .. })
    }

    fn key(&self) -> (u8, Cell, Option<Color>) {
        match *self {
            BlockAction::Remove { cell } => (0, cell, None),
            BlockAction::Place { cell, color } => (1, cell, Some(color)),
        }
    }
}

impl Ord for BlockAction {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for BlockAction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for BlockAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockAction::Place { cell, color } => write!(f, "place {color} {cell}"),
            BlockAction::Remove { cell } => write!(f, "remove {cell}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FeasibilityRule {
    /// Any in-bounds placement on an empty cell.
    Unrestricted,
    /// Placements must sit at `y = 0` or share a face with an occupied cell.
    #[default]
    Grounded,
}

/// Occupancy of every grid cell, stored densely in `(y, z, x)` order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WorldState {
    dims: GridDims,
    cells: Vec<Option<Color>>,
}

impl WorldState {
    pub fn empty(dims: GridDims) -> Self {
        Self {
            dims,
            cells: vec![None; dims.n_cells()],
        }
    }

    /// Builds a state from a block list. Later duplicates overwrite earlier ones.
    pub fn from_blocks(
        dims: GridDims,
        blocks: impl IntoIterator<Item = (Cell, Color)>,
    ) -> Result<Self, WorldError> {
        let mut world = Self::empty(dims);
        for (cell, color) in blocks {
            world.check_bounds(cell)?;
            let i = dims.index_of(cell);
            world.cells[i] = Some(color);
        }
        Ok(world)
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn get(&self, cell: Cell) -> Option<Color> {
        if self.dims.contains(cell) {
            self.cells[self.dims.index_of(cell)]
        } else {
            None
        }
    }

    /// Color at an enumeration index (see [`GridDims::index_of`]).
    pub fn get_index(&self, index: usize) -> Option<Color> {
        self.cells[index]
    }

    pub fn is_occupied(&self, cell: Cell) -> bool {
        self.get(cell).is_some()
    }

    pub fn len(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(Option::is_none)
    }

    /// Occupied cells in `(y, z, x)` order.
    pub fn blocks(&self) -> impl Iterator<Item = (Cell, Color)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|color| (self.dims.cell_at(i), color)))
    }

    fn check_bounds(&self, cell: Cell) -> Result<(), WorldError> {
        if self.dims.contains(cell) {
            Ok(())
        } else {
            Err(WorldError::OutOfBounds {
                x: cell.x as i64,
                y: cell.y as i64,
                z: cell.z as i64,
                dims: self.dims,
            })
        }
    }

    fn touches_block(&self, cell: Cell) -> bool {
        let d = self.dims;
        let mut neighbors = [None; 6];
        if cell.x > 0 {
            neighbors[0] = Some(Cell::new(cell.x - 1, cell.y, cell.z));
        }
        if cell.x + 1 < d.sx {
            neighbors[1] = Some(Cell::new(cell.x + 1, cell.y, cell.z));
        }
        if cell.y > 0 {
            neighbors[2] = Some(Cell::new(cell.x, cell.y - 1, cell.z));
        }
        if cell.y + 1 < d.sy {
            neighbors[3] = Some(Cell::new(cell.x, cell.y + 1, cell.z));
        }
        if cell.z > 0 {
            neighbors[4] = Some(Cell::new(cell.x, cell.y, cell.z - 1));
        }
        if cell.z + 1 < d.sz {
            neighbors[5] = Some(Cell::new(cell.x, cell.y, cell.z + 1));
        }
        neighbors.into_iter().flatten().any(|n| self.is_occupied(n))
    }

    /// Whether a placement (of any color) at `cell` would succeed.
    pub fn can_place(&self, cell: Cell, rule: FeasibilityRule) -> bool {
        self.check_place(cell, rule).is_ok()
    }

    fn check_place(&self, cell: Cell, rule: FeasibilityRule) -> Result<(), WorldError> {
        self.check_bounds(cell)?;
        if self.is_occupied(cell) {
            return Err(WorldError::Occupied(cell));
        }
        if rule == FeasibilityRule::Grounded && cell.y != 0 && !self.touches_block(cell) {
            return Err(WorldError::Ungrounded(cell));
        }
        Ok(())
    }

    /// Applies `action` in place.
    pub fn apply_mut(&mut self, action: BlockAction, rule: FeasibilityRule) -> Result<(), WorldError> {
        match action {
            BlockAction::Place { cell, color } => {
                self.check_place(cell, rule)?;
                let i = self.dims.index_of(cell);
                self.cells[i] = Some(color);
            }
            BlockAction::Remove { cell } => {
                self.check_bounds(cell)?;
                let i = self.dims.index_of(cell);
                if self.cells[i].take().is_none() {
                    return Err(WorldError::Empty(cell));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, action: BlockAction, rule: FeasibilityRule) -> Result<WorldState, WorldError> {
        let mut next = self.clone();
        next.apply_mut(action, rule)?;
        Ok(next)
    }

    /// Applies a sequence of actions, stopping at the first infeasible one.
    pub fn replay<'a>(
        &self,
        actions: impl IntoIterator<Item = &'a BlockAction>,
        rule: FeasibilityRule,
    ) -> Result<WorldState, WorldError> {
        let mut next = self.clone();
        for &a in actions {
            next.apply_mut(a, rule)?;
        }
        Ok(next)
    }
}

/// Every action for which [`WorldState::apply`] would succeed.
pub fn feasible_actions(world: &WorldState, rule: FeasibilityRule) -> BTreeSet<BlockAction> {
    let mut out = BTreeSet::new();
    for cell in world.dims().cells() {
        if world.is_occupied(cell) {
            out.insert(BlockAction::Remove { cell });
        } else if world.can_place(cell, rule) {
            out.extend(Color::ALL.into_iter().map(|color| BlockAction::Place { cell, color }));
        }
    }
    out
}

/// The set of actions that turns `before` into `after`.
///
/// A recolored cell yields both a removal and a placement. Iterating the
/// returned set lists removals first, which keeps it replayable under
/// [`FeasibilityRule::Unrestricted`].
pub fn net_change(before: &WorldState, after: &WorldState) -> Result<BTreeSet<BlockAction>, WorldError> {
    if before.dims() != after.dims() {
        return Err(WorldError::DimensionMismatch(before.dims(), after.dims()));
    }
    let dims = before.dims();
    let mut out = BTreeSet::new();
    for (i, (a, b)) in before.cells.iter().zip(&after.cells).enumerate() {
        if a == b {
            continue;
        }
        let cell = dims.cell_at(i);
        if a.is_some() {
            out.insert(BlockAction::Remove { cell });
        }
        if let Some(color) = *b {
            out.insert(BlockAction::Place { cell, color });
        }
    }
    Ok(out)
}

/// Text rendering: one block of `sz` rows per y-layer (ground first), each
/// row `sx` characters wide. Empty cells are `.`.
pub fn render_text(world: &WorldState) -> String {
    let d = world.dims();
    let mut out = String::with_capacity((d.sx + 1) * d.sz * d.sy + 8 * d.sy);
    for y in 0..d.sy {
        if y > 0 {
            out.push('\n');
        }
        out.push_str(&format!("y={y}\n"));
        for z in 0..d.sz {
            for x in 0..d.sx {
                out.push(world.get(Cell::new(x, y, z)).map_or('.', Color::initial));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> GridDims {
        GridDims::default()
    }

    #[test]
    fn ground_placement_adds_one_block() {
        let w = WorldState::empty(dims())
            .apply(BlockAction::place(0, 0, 0, Color::Red), FeasibilityRule::Grounded)
            .unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.get(Cell::new(0, 0, 0)), Some(Color::Red));
    }

    #[test]
    fn place_then_remove_restores_world() {
        let w0 = WorldState::empty(dims());
        let w1 = w0
            .apply(BlockAction::place(4, 0, 2, Color::Blue), FeasibilityRule::Grounded)
            .unwrap();
        let w2 = w1.apply(BlockAction::remove(4, 0, 2), FeasibilityRule::Grounded).unwrap();
        assert_eq!(w0, w2);
        // value semantics
        assert_eq!(w1.len(), 1);
    }

    #[test]
    fn floating_placement_is_rejected_when_grounded() {
        let err = WorldState::empty(dims())
            .apply(BlockAction::place(0, 3, 0, Color::Red), FeasibilityRule::Grounded)
            .unwrap_err();
        assert_eq!(err, WorldError::Ungrounded(Cell::new(0, 3, 0)));
        assert!(WorldState::empty(dims())
            .apply(BlockAction::place(0, 3, 0, Color::Red), FeasibilityRule::Unrestricted)
            .is_ok());
    }

    #[test]
    fn apply_error_paths() {
        let w = WorldState::empty(dims())
            .apply(BlockAction::place(1, 0, 1, Color::Green), FeasibilityRule::Grounded)
            .unwrap();
        assert_eq!(
            w.apply(BlockAction::place(1, 0, 1, Color::Red), FeasibilityRule::Grounded),
            Err(WorldError::Occupied(Cell::new(1, 0, 1)))
        );
        assert_eq!(
            w.apply(BlockAction::remove(2, 0, 1), FeasibilityRule::Grounded),
            Err(WorldError::Empty(Cell::new(2, 0, 1)))
        );
        assert!(matches!(
            w.apply(BlockAction::place(11, 0, 0, Color::Red), FeasibilityRule::Grounded),
            Err(WorldError::OutOfBounds { .. })
        ));
        // side contact grounds a block
        assert!(w
            .apply(BlockAction::place(1, 1, 1, Color::Red), FeasibilityRule::Grounded)
            .is_ok());
    }

    #[test]
    fn empty_world_feasible_set_is_ground_layer() {
        let set = feasible_actions(&WorldState::empty(dims()), FeasibilityRule::Grounded);
        assert_eq!(set.len(), 11 * 11 * 6);
        assert!(set.iter().all(|a| a.is_place() && a.cell().y == 0));
    }

    #[test]
    fn single_block_removal_is_feasible() {
        let w = WorldState::empty(dims())
            .apply(BlockAction::place(3, 0, 3, Color::Yellow), FeasibilityRule::Grounded)
            .unwrap();
        let set = feasible_actions(&w, FeasibilityRule::Grounded);
        assert!(set.contains(&BlockAction::remove(3, 0, 3)));
        assert!(set.contains(&BlockAction::place(3, 1, 3, Color::Red)));
    }

    #[test]
    fn net_change_examples() {
        let a = WorldState::empty(dims());
        assert!(net_change(&a, &a).unwrap().is_empty());
        let b = a
            .apply(BlockAction::place(2, 0, 3, Color::Red), FeasibilityRule::Grounded)
            .unwrap();
        let d = net_change(&a, &b).unwrap();
        assert_eq!(d.into_iter().collect::<Vec<_>>(), vec![BlockAction::place(2, 0, 3, Color::Red)]);
        let c = WorldState::from_blocks(dims(), [(Cell::new(2, 0, 3), Color::Blue)]).unwrap();
        let d = net_change(&b, &c).unwrap();
        assert_eq!(
            d.into_iter().collect::<Vec<_>>(),
            vec![BlockAction::remove(2, 0, 3), BlockAction::place(2, 0, 3, Color::Blue)]
        );
    }

    #[test]
    fn net_change_rejects_dimension_mismatch() {
        let a = WorldState::empty(GridDims::new(2, 2, 2));
        let b = WorldState::empty(GridDims::new(3, 2, 2));
        assert!(matches!(net_change(&a, &b), Err(WorldError::DimensionMismatch(..))));
    }

    #[test]
    fn render_examples() {
        let w = WorldState::empty(GridDims::new(3, 2, 2));
        assert_eq!(render_text(&w), "y=0\n...\n...\n\ny=1\n...\n...\n");
        let w = w.apply(BlockAction::place(2, 0, 1, Color::Red), FeasibilityRule::Grounded).unwrap();
        assert_eq!(render_text(&w), "y=0\n...\n..R\n\ny=1\n...\n...\n");
    }

    #[test]
    fn cell_enumeration_round_trips() {
        let d = GridDims::new(4, 3, 5);
        for i in 0..d.n_cells() {
            assert_eq!(d.index_of(d.cell_at(i)), i);
        }
        let cells: Vec<Cell> = d.cells().collect();
        let mut sorted = cells.clone();
        sorted.sort();
        assert_eq!(cells, sorted);
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(GridDims::new(0, 1, 1).validate().is_err());
        assert!(GridDims::default().validate().is_ok());
    }
}
