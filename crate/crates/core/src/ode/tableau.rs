use serde::{Deserialize, Serialize};

/// Explicit embedded Runge-Kutta coefficients.
///
/// `a` is stored as full `s × s` rows with zeros on and above the diagonal.
/// `b` propagates the solution, `b_tilde` gives the embedded solution used
/// for the local error estimate, and `b_err[i] = b_tilde[i] - b[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tableau {
    pub name: String,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub b_tilde: Vec<f64>,
    pub b_err: Vec<f64>,
    pub c: Vec<f64>,
    pub order: u32,
    pub fsal: bool,
}

// Tsitouras 5(4). `TSIT5_ERR` are the difference weights between the
// embedded and propagating rows.
const TSIT5_C: [f64; 7] = [0.0, 0.161, 0.327, 0.9, 0.980_025_540_904_509_7, 1.0, 1.0];

const TSIT5_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.161, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        -0.008_480_655_492_356_989,
        0.335_480_655_492_357,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        2.897_153_057_105_493,
        -6.359_448_489_975_075,
        4.362_295_432_869_581_5,
        0.0,
        0.0,
        0.0,
    ],
    [
        5.325_864_828_439_257,
        -11.748_883_564_062_828,
        7.495_539_342_889_836_5,
        -0.092_495_066_361_755_25,
        0.0,
        0.0,
    ],
    [
        5.861_455_442_946_42,
        -12.920_969_317_847_11,
        8.159_367_898_576_159,
        -0.071_584_973_281_401,
        -0.028_269_050_394_068_383,
        0.0,
    ],
    [
        0.096_460_766_818_065_23,
        0.01,
        0.479_889_650_414_499_6,
        1.379_008_574_103_742,
        -3.290_069_515_436_081,
        2.324_710_524_099_774,
    ],
];

const TSIT5_ERR: [f64; 7] = [
    -0.001_780_011_052_225_771_4,
    -0.000_816_434_459_656_746_9,
    0.007_880_878_010_261_996,
    -0.144_711_007_173_262_9,
    0.582_357_165_452_555_2,
    -0.458_082_105_929_186_97,
    1.0 / 66.0,
];

impl Tableau {
    fn build(
        name: &str,
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        b_tilde: Vec<f64>,
        c: Vec<f64>,
        order: u32,
        fsal: bool,
    ) -> Self {
        let b_err = b_tilde.iter().zip(&b).map(|(bt, b)| bt - b).collect();
        Self {
            name: name.to_string(),
            a,
            b,
            b_tilde,
            b_err,
            c,
            order,
            fsal,
        }
    }

    /// Tsitouras 5(4): seven stages, FSAL.
    pub fn tsit5() -> Self {
        let s = 7;
        let a: Vec<Vec<f64>> = TSIT5_A
            .iter()
            .map(|row| {
                let mut r = row.to_vec();
                r.resize(s, 0.0);
                r
            })
            .collect();
        let b = a[s - 1].clone();
        let b_tilde: Vec<f64> = b.iter().zip(TSIT5_ERR).map(|(b, e)| b + e).collect();
        let mut tab = Self::build("tsit5", a, b, b_tilde, TSIT5_C.to_vec(), 5, true);
        // keep the difference weights exactly as published
        tab.b_err = TSIT5_ERR.to_vec();
        tab
    }

    /// Bogacki–Shampine 3(2): four stages, FSAL.
    pub fn bs3() -> Self {
        let a = vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.0, 0.0, 0.0],
            vec![0.0, 0.75, 0.0, 0.0],
            vec![2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0],
        ];
        let b = vec![2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0];
        let b_tilde = vec![7.0 / 24.0, 0.25, 1.0 / 3.0, 0.125];
        Self::build("bs3", a, b, b_tilde, vec![0.0, 0.5, 0.75, 1.0], 3, true)
    }

    /// Classical fourth-order method with no embedded estimate (`b_tilde = b`).
    pub fn rk4() -> Self {
        let a = vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        let b = vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
        Self::build("rk4", a, b.clone(), b, vec![0.0, 0.5, 0.5, 1.0], 4, false)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "tsit5" => Some(Self::tsit5()),
            "bs3" => Some(Self::bs3()),
            "rk4" => Some(Self::rk4()),
            _ => None,
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

/// Residuals of the consistency and low-order conditions of a tableau.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderConditionReport {
    pub sum_b: f64,
    pub sum_b_tilde: f64,
    pub row_sums: f64,
    pub order2: f64,
    pub order3: f64,
    pub order3_tree: f64,
    pub embedded_order2: f64,
    pub strictly_lower: bool,
}

impl OrderConditionReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.sum_b,
            self.sum_b_tilde,
            self.row_sums,
            self.order2,
            self.order3,
            self.order3_tree,
            self.embedded_order2,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.strictly_lower && self.max_residual() < tol
    }
}

pub fn check_order_conditions(tab: &Tableau) -> OrderConditionReport {
    let s = tab.stages();
    let sum = |v: &[f64]| v.iter().sum::<f64>();
    let row_sums = (0..s)
        .map(|i| (tab.c[i] - sum(&tab.a[i])).abs())
        .fold(0.0, f64::max);
    let bc: f64 = (0..s).map(|i| tab.b[i] * tab.c[i]).sum();
    let bcc: f64 = (0..s).map(|i| tab.b[i] * tab.c[i] * tab.c[i]).sum();
    let bac: f64 = (0..s)
        .map(|i| tab.b[i] * (0..s).map(|j| tab.a[i][j] * tab.c[j]).sum::<f64>())
        .sum();
    let btc: f64 = (0..s).map(|i| tab.b_tilde[i] * tab.c[i]).sum();
    let strictly_lower = (0..s).all(|i| (i..s).all(|j| tab.a[i][j] == 0.0));
    OrderConditionReport {
        sum_b: (sum(&tab.b) - 1.0).abs(),
        sum_b_tilde: (sum(&tab.b_tilde) - 1.0).abs(),
        row_sums,
        order2: (bc - 0.5).abs(),
        order3: (bcc - 1.0 / 3.0).abs(),
        order3_tree: (bac - 1.0 / 6.0).abs(),
        embedded_order2: (btc - 0.5).abs(),
        strictly_lower,
    }
}
