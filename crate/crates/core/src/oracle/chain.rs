//! Graph structure of a finite Markov chain: recurrent classes and periods.

use nalgebra::DMatrix;

/// Positive-probability threshold for treating an entry as an edge.
const EDGE_EPS: f64 = 0.0;

fn reachability(p: &DMatrix<f64>) -> Vec<Vec<bool>> {
    let n = p.nrows();
    let mut reach = vec![vec![false; n]; n];
    for (start, row) in reach.iter_mut().enumerate() {
        let mut stack = vec![start];
        row[start] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if p[(u, v)] > EDGE_EPS && !row[v] {
                    row[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    reach
}

/// Closed communicating classes, each sorted, in order of smallest member.
pub fn recurrent_classes(p: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = p.nrows();
    let reach = reachability(p);
    let mut assigned = vec![false; n];
    let mut classes = Vec::new();
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let class: Vec<usize> = (0..n).filter(|&j| reach[i][j] && reach[j][i]).collect();
        for &j in &class {
            assigned[j] = true;
        }
        // closed iff nothing reachable from the class lies outside it
        let closed = (0..n).all(|j| !reach[i][j] || class.contains(&j));
        if closed {
            classes.push(class);
        }
    }
    classes
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Period of a closed class, from BFS levels: the gcd over internal edges
/// `u -> v` of `level(u) + 1 - level(v)`.
pub fn period(p: &DMatrix<f64>, class: &[usize]) -> usize {
    let n = p.nrows();
    let mut level = vec![usize::MAX; n];
    let root = class[0];
    level[root] = 0;
    let mut queue = std::collections::VecDeque::from([root]);
    let mut g = 0;
    while let Some(u) = queue.pop_front() {
        for &v in class {
            if p[(u, v)] <= EDGE_EPS {
                continue;
            }
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            } else {
                let diff = (level[u] + 1).abs_diff(level[v]);
                g = gcd(g, diff);
            }
        }
    }
    g.max(1)
}
