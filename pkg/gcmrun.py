"""gcmrun.py — Entry point. All logic lives in the gcm/ package.

Run with:
    python gcmrun.py gradcheck --config configs/gradcheck.json
or, after pip install -e .:
    gcm train --config configs/synthetic.json
"""

from gcm import main

if __name__ == "__main__":
    main()
