//! Validation of bundled map assets and their episode specs.
//!
//! The shipped maps are authored for this codebase — compact desk-scale
//! layouts with a slippery corridor, not traced from any published floor
//! plan. `validate_asset` is the CI gate that keeps them usable: the text
//! grammar must parse, both terrain types must be present, the outer wall
//! must be closed, and every subgoal must be reachable from the episode's
//! start through free cells.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::Result;
use crate::planner::{EpisodeFile, PlannerConfig};
use crate::world::{GridMap, SemanticClass};

/// Reachability mask over free cells, 4-connected, seeded at `start`.
/// Cells off the map or non-free are never reached.
pub fn flood_fill_free(map: &GridMap, start: &[f64; 2]) -> Vec<bool> {
    let mut reached = vec![false; map.width * map.height];
    let Some((sx, sy)) = map.cell_index(start) else {
        return reached;
    };
    if !map.get(sx, sy).is_free() {
        return reached;
    }
    let mut queue = VecDeque::new();
    reached[sy * map.width + sx] = true;
    queue.push_back((sx, sy));
    while let Some((ix, iy)) = queue.pop_front() {
        let push = |nx: usize, ny: usize, reached: &mut Vec<bool>, queue: &mut VecDeque<_>| {
            let idx = ny * map.width + nx;
            if !reached[idx] && map.get(nx, ny).is_free() {
                reached[idx] = true;
                queue.push_back((nx, ny));
            }
        };
        if ix > 0 {
            push(ix - 1, iy, &mut reached, &mut queue);
        }
        if ix + 1 < map.width {
            push(ix + 1, iy, &mut reached, &mut queue);
        }
        if iy > 0 {
            push(ix, iy - 1, &mut reached, &mut queue);
        }
        if iy + 1 < map.height {
            push(ix, iy + 1, &mut reached, &mut queue);
        }
    }
    reached
}

fn check_map(map: &GridMap, problems: &mut Vec<String>) {
    let mut has_nominal = false;
    let mut has_slippery = false;
    for c in map.cells() {
        match c {
            SemanticClass::FreeNominal => has_nominal = true,
            SemanticClass::FreeSlippery => has_slippery = true,
            _ => {}
        }
    }
    if !has_nominal {
        problems.push("no Nominal free region ('.') anywhere on the map".to_string());
    }
    if !has_slippery {
        problems.push("no Slippery region ('~') anywhere on the map".to_string());
    }
    let mut open_rim = 0usize;
    for ix in 0..map.width {
        for iy in [0, map.height - 1] {
            if map.get(ix, iy) != SemanticClass::Occupied {
                open_rim += 1;
            }
        }
    }
    for iy in 0..map.height {
        for ix in [0, map.width - 1] {
            if map.get(ix, iy) != SemanticClass::Occupied {
                open_rim += 1;
            }
        }
    }
    if open_rim > 0 {
        problems.push(format!(
            "boundary not closed: {open_rim} rim cell(s) are not Occupied"
        ));
    }
}

fn check_episode(map: &GridMap, episode: &EpisodeFile, problems: &mut Vec<String>) {
    let start = episode.start.position();
    match map.cell_index(&start) {
        Some((ix, iy)) if map.get(ix, iy).is_free() => {}
        Some(_) => problems.push(format!(
            "start ({}, {}) is not on a free cell",
            start[0], start[1]
        )),
        None => problems.push(format!(
            "start ({}, {}) lies outside the map",
            start[0], start[1]
        )),
    }
    let reached = flood_fill_free(map, &start);
    for (k, goal) in episode.subgoals.iter().enumerate() {
        let ok = match map.cell_index(&goal.center) {
            Some((ix, iy)) => reached[iy * map.width + ix],
            None => false,
        };
        if !ok {
            problems.push(format!(
                "unreachable subgoal {} at ({}, {})",
                k, goal.center[0], goal.center[1]
            ));
        }
    }
}

/// Validate a bundled map together with its episode spec. Returns the list
/// of violations — empty means the asset is usable. I/O failures (missing
/// files) are hard errors; content problems are diagnostics.
pub fn validate_asset(map_path: &Path, episode_path: &Path) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    let map_text = std::fs::read_to_string(map_path)?;
    let episode_text = std::fs::read_to_string(episode_path)?;
    let map = match GridMap::from_text(&map_text) {
        Ok(m) => m,
        Err(e) => {
            problems.push(format!("map does not parse: {e}"));
            return Ok(problems);
        }
    };
    check_map(&map, &mut problems);
    let episode = match crate::planner::parse_episode_spec(&episode_text, &PlannerConfig::default())
    {
        Ok(ep) => ep,
        Err(e) => {
            problems.push(format!("episode spec does not parse: {e}"));
            return Ok(problems);
        }
    };
    check_episode(&map, &episode, &mut problems);
    Ok(problems)
}

#[cfg(test)]
mod tests {
    use super::*;

    // 10x6 ring of walls, nominal interior, one slippery streak, one wall
    // stub near the lower left.
    const GOOD: &str = "\
10 6 0.05 0 0
##########
#....~~..#
#....~~..#
#..#.....#
#..#.....#
##########
";

    fn parse(text: &str) -> GridMap {
        GridMap::from_text(text).unwrap()
    }

    fn episode(text: &str) -> EpisodeFile {
        crate::planner::parse_episode_spec(text, &PlannerConfig::default()).unwrap()
    }

    #[test]
    fn clean_asset_produces_no_diagnostics() {
        let map = parse(GOOD);
        let mut problems = Vec::new();
        check_map(&map, &mut problems);
        assert!(problems.is_empty(), "{problems:?}");
        let ep = episode("map=m\nstart=0.125,0.125,0,0\nsubgoal=0.425,0.225,0.05\n");
        check_episode(&map, &ep, &mut problems);
        assert!(problems.is_empty(), "{problems:?}");
    }

    #[test]
    fn missing_slippery_cells_are_reported() {
        let all_nominal = GOOD.replace('~', ".");
        let mut problems = Vec::new();
        check_map(&parse(&all_nominal), &mut problems);
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("Slippery"), "{problems:?}");
    }

    #[test]
    fn open_rim_is_reported() {
        let holed = GOOD.replacen("##########\n#....~~..#", "####.#####\n#....~~..#", 1);
        let mut problems = Vec::new();
        check_map(&parse(&holed), &mut problems);
        assert!(
            problems.iter().any(|p| p.contains("boundary not closed")),
            "{problems:?}"
        );
    }

    #[test]
    fn flood_fill_respects_walls() {
        let map = parse(GOOD);
        let reached = flood_fill_free(&map, &[0.125, 0.125]);
        // Interior free cell on the left side: reached.
        let (ix, iy) = map.cell_index(&[0.075, 0.175]).unwrap();
        assert!(reached[iy * map.width + ix]);
        // Wall cells are never reached.
        let (wx, wy) = map.cell_index(&[0.175, 0.125]).unwrap();
        assert!(!reached[wy * map.width + wx]);
        // Seeding inside a wall reaches nothing.
        assert!(flood_fill_free(&map, &[0.025, 0.025]).iter().all(|r| !r));
    }

    #[test]
    fn walled_off_subgoal_is_unreachable() {
        // Extend the wall stub into a full partition.
        let split = "\
10 6 0.05 0 0
##########
#....#...#
#....#...#
#..#.#...#
#..#.#...#
##########
";
        let map = parse(split);
        let ep = episode("map=m\nstart=0.075,0.125,0,0\nsubgoal=0.325,0.125,0.05\n");
        let mut problems = Vec::new();
        check_episode(&map, &ep, &mut problems);
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("unreachable subgoal 0"), "{problems:?}");
        // Same goal on the near side of the partition: fine.
        let ep = episode("map=m\nstart=0.075,0.125,0,0\nsubgoal=0.225,0.225,0.05\n");
        let mut problems = Vec::new();
        check_episode(&map, &ep, &mut problems);
        assert!(problems.is_empty(), "{problems:?}");
    }

    #[test]
    fn start_inside_a_wall_is_reported() {
        let map = parse(GOOD);
        let ep = episode("map=m\nstart=0.025,0.025,0,0\nsubgoal=0.125,0.125,0.05\n");
        let mut problems = Vec::new();
        check_episode(&map, &ep, &mut problems);
        assert!(problems.iter().any(|p| p.contains("not on a free cell")));
        assert!(problems.iter().any(|p| p.contains("unreachable subgoal")));
    }

    #[test]
    fn validate_asset_reads_files_and_reports() {
        let dir = std::env::temp_dir().join(format!("ocular-asset-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let map_path = dir.join("t.map");
        let ep_path = dir.join("t.episode");
        std::fs::write(&map_path, GOOD).unwrap();
        std::fs::write(
            &ep_path,
            "map=t.map\nstart=0.125,0.125,0,0\nsubgoal=0.425,0.225,0.05\n",
        )
        .unwrap();
        assert!(validate_asset(&map_path, &ep_path).unwrap().is_empty());

        std::fs::write(&map_path, "cell_size 0.05\nnot a map\n").unwrap();
        let problems = validate_asset(&map_path, &ep_path).unwrap();
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("does not parse"));

        std::fs::remove_dir_all(&dir).unwrap();
        assert!(validate_asset(&map_path, &ep_path).is_err());
    }
}
