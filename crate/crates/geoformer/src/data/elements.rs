//! Element symbol table, atomic numbers 1..=100 (H through Fm).

pub const MAX_ATOMIC_NUMBER: usize = 100;

#[rustfmt::skip]
const SYMBOLS: [&str; MAX_ATOMIC_NUMBER] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
];

/// Atomic number for a symbol, if it is in the supported range.
pub fn atomic_number(symbol: &str) -> Option<u8> {
    SYMBOLS
        .iter()
        .position(|&s| s == symbol)
        .map(|i| (i + 1) as u8)
}

/// Symbol for an atomic number in 1..=100.
pub fn symbol(z: u8) -> Option<&'static str> {
    if z == 0 || z as usize > MAX_ATOMIC_NUMBER {
        None
    } else {
        Some(SYMBOLS[z as usize - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        assert_eq!(atomic_number("H"), Some(1));
        assert_eq!(atomic_number("C"), Some(6));
        assert_eq!(atomic_number("Fm"), Some(100));
        assert_eq!(symbol(9), Some("F"));
        assert_eq!(atomic_number("Xx"), None);
        assert_eq!(symbol(0), None);
        assert_eq!(symbol(101), None);
        for z in 1..=100u8 {
            assert_eq!(atomic_number(symbol(z).unwrap()), Some(z));
        }
    }
}
