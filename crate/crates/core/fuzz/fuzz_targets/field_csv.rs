#![no_main]

use std::sync::{Arc, OnceLock};

use impulse_games::{Grid, ValueField};
use libfuzzer_sys::fuzz_target;

fn grids() -> &'static [Arc<Grid>; 2] {
    static GRIDS: OnceLock<[Arc<Grid>; 2]> = OnceLock::new();
    GRIDS.get_or_init(|| {
        [
            Arc::new(Grid::new(&[-1.0], &[1.0], &[5]).unwrap()),
            Arc::new(Grid::new(&[-1.0, 0.0], &[1.0, 2.0], &[3, 2]).unwrap()),
        ]
    })
}

fuzz_target!(|data: &str| {
    for grid in grids() {
        if let Ok(field) = ValueField::from_csv(data, grid.clone()) {
            let again = ValueField::from_csv(&field.to_csv(), grid.clone()).unwrap();
            assert_eq!(field.values().len(), again.values().len());
        }
    }
});
