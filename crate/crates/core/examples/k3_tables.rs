//! Strong Kleene truth tables for the five binary operators and NOT.
use theia::{k3_apply, k3_not, K3Op, K3};

fn main() {
    for op in K3Op::ALL {
        println!("{} ({})", op.name(), op.symbol());
        print!("     ");
        for y in K3::ALL {
            print!(" {y}");
        }
        println!();
        for x in K3::ALL {
            print!("   {x} ");
            for y in K3::ALL {
                print!(" {}", k3_apply(op, x, y));
            }
            println!();
        }
    }
    print!("not:");
    for x in K3::ALL {
        print!("  {x}->{}", k3_not(x));
    }
    println!();
}
