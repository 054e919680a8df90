"""
Template filters for benchmark reports.

Usage in templates:
    {% load harness_tags %}
    {{ row.giou|ratio4 }}
    {{ row.split|split_label }}
"""

from decimal import ROUND_HALF_UP, Decimal, localcontext
from fractions import Fraction

from django import template

from harness.choices import Split

register = template.Library()

FOUR_PLACES = Decimal('0.0001')


def format_ratio(value, missing: str = 'n/a') -> str:
    """
    Render an exact ratio with four decimals, rounding half up.

    Example: Fraction(1, 3) -> '0.3333'; None -> 'n/a'
    """
    if value is None:
        return missing
    fraction = Fraction(value)
    with localcontext() as ctx:
        ctx.prec = 50
        decimal = Decimal(fraction.numerator) / Decimal(fraction.denominator)
        return str(decimal.quantize(FOUR_PLACES, rounding=ROUND_HALF_UP))


@register.filter(name='ratio4')
def ratio4(value):
    """Usage: {{ report.total.giou|ratio4 }}"""
    try:
        return format_ratio(value)
    except (TypeError, ValueError):
        return 'n/a'


@register.filter(name='split_label')
def split_label(value):
    """'ad-hoc' -> 'Ad-hoc'; 'total' -> 'Total'"""
    if value in Split.values:
        return Split(value).label
    return str(value).capitalize()
