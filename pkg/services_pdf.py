import logging
from io import BytesIO
from pathlib import Path
from typing import Dict, List, Optional, Sequence

try:
    from reportlab.lib.colors import HexColor
    from reportlab.lib.enums import TA_CENTER, TA_LEFT
    from reportlab.lib.pagesizes import A4
    from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
    from reportlab.lib.units import inch
    from reportlab.platypus import Image as PDFImage
    from reportlab.platypus import KeepTogether, PageBreak, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle
    REPORTLAB_AVAILABLE = True
except ImportError:
    REPORTLAB_AVAILABLE = False

from models_schemas import MetricReport

logger = logging.getLogger(__name__)

FIGURE_WIDTH_INCHES = 6


class EvaluationPDFGenerator:
    """Render a segmentation evaluation as a PDF."""

    def __init__(self):
        self.styles = None
        self.custom_styles = {}
        if REPORTLAB_AVAILABLE:
            self._initialize_styles()

    def _initialize_styles(self):
        self.styles = getSampleStyleSheet()
        self.custom_styles = {
            'title': ParagraphStyle(
                'CustomTitle',
                parent=self.styles['Title'],
                fontSize=22,
                spaceAfter=24,
                textColor=HexColor('#2C3E50'),
                alignment=TA_CENTER
            ),
            'heading1': ParagraphStyle(
                'CustomHeading1',
                parent=self.styles['Heading1'],
                fontSize=16,
                spaceAfter=10,
                textColor=HexColor('#34495E')
            ),
            'body': ParagraphStyle(
                'CustomBody',
                parent=self.styles['Normal'],
                fontSize=10,
                spaceAfter=6,
                alignment=TA_LEFT
            ),
        }

    def _table(self, rows: List[List[str]], widths: Sequence[float]) -> "Table":
        table = Table(rows, colWidths=[w * inch for w in widths])
        table.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), HexColor('#34495E')),
            ('TEXTCOLOR', (0, 0), (-1, 0), HexColor('#FFFFFF')),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('ALIGN', (0, 0), (-1, -1), 'LEFT'),
            ('BACKGROUND', (0, 1), (-1, -1), HexColor('#ECF0F1')),
            ('GRID', (0, 0), (-1, -1), 1, HexColor('#BDC3C7'))
        ]))
        return table

    def generate_report_pdf(
        self,
        report: MetricReport,
        title: str,
        details: Optional[Dict[str, str]] = None,
        stability: Optional[Dict[str, float]] = None,
        figures: Sequence[Path] = (),
    ) -> bytes:
        if not REPORTLAB_AVAILABLE:
            logger.error("ReportLab not available. Cannot generate PDF.")
            return self._generate_fallback_pdf(report, title)

        logger.info(f"Generating PDF report '{title}' for {report.n_samples} samples")
        buffer = BytesIO()
        doc = SimpleDocTemplate(buffer, pagesize=A4, rightMargin=72, leftMargin=72, topMargin=72, bottomMargin=18,
                                invariant=1)

        story = []
        story.extend(self._create_summary(report, title, details or {}))
        if stability:
            story.extend(self._create_stability_section(stability))
        story.append(PageBreak())
        story.extend(self._create_sample_table(report))
        if figures:
            story.append(PageBreak())
            story.extend(self._create_figures(figures))

        doc.build(story)
        pdf_bytes = buffer.getvalue()
        buffer.close()

        logger.info(f"PDF generated successfully ({len(pdf_bytes)} bytes)")
        return pdf_bytes

    def _create_summary(self, report: MetricReport, title: str, details: Dict[str, str]) -> List:
        content = [
            Paragraph(title, self.custom_styles['title']),
            Spacer(1, 0.3 * inch),
        ]
        rows = [['Metric', 'Value'],
                ['Test samples', str(report.n_samples)],
                ['Mean IoU', f"{report.mean_iou:.4f}"],
                ['Mean Dice', f"{report.mean_dice:.4f}"],
                ['Mean pixel accuracy', f"{report.mean_pixel_accuracy:.4f}"],
                ['Threshold', f"{report.threshold:g}"]]
        rows += [[key, value] for key, value in details.items()]
        content.append(self._table(rows, [2.5, 3]))
        return content

    def _create_stability_section(self, stability: Dict[str, float]) -> List:
        content = [Spacer(1, 0.3 * inch), Paragraph("Loss stability (std, last epochs)", self.custom_styles['heading1'])]
        rows = [['Loss', 'Std']] + [[name, f"{value:.5f}"] for name, value in stability.items()]
        content.append(self._table(rows, [2.5, 3]))
        return content

    def _create_sample_table(self, report: MetricReport) -> List:
        content = [Paragraph("Per-sample metrics", self.custom_styles['heading1'])]
        rows = [['Sample', 'IoU', 'Dice', 'Accuracy']]
        rows += [[m.name, f"{m.iou:.4f}", f"{m.dice:.4f}", f"{m.pixel_accuracy:.4f}"] for m in report.samples]
        content.append(self._table(rows, [2.6, 1, 1, 1]))
        return content

    def _create_figures(self, figures: Sequence[Path]) -> List:
        content = [Paragraph("Image | ground truth | generated mask", self.custom_styles['heading1'])]
        for path in figures:
            image = PDFImage(str(path))
            # Full text width, aspect ratio kept
            image.drawWidth = FIGURE_WIDTH_INCHES * inch
            image.drawHeight = image.drawWidth * image.imageHeight / image.imageWidth
            content.append(KeepTogether([Paragraph(Path(path).name, self.custom_styles['body']), image, Spacer(1, 0.15 * inch)]))
        return content

    def _generate_fallback_pdf(self, report: MetricReport, title: str) -> bytes:
        """Plain-text stand-in when reportlab is missing."""
        logger.warning("Generating fallback PDF (ReportLab not available)")
        report_text = (
            f"{title.upper()}\n\n"
            f"SUMMARY:\n"
            f"- Test samples: {report.n_samples}\n"
            f"- Mean IoU: {report.mean_iou:.4f}\n"
            f"- Mean Dice: {report.mean_dice:.4f}\n"
            f"- Mean pixel accuracy: {report.mean_pixel_accuracy:.4f}\n\n"
            f"SAMPLES:\n"
        )
        for m in report.samples:
            report_text += f"{m.name}: iou={m.iou:.4f} dice={m.dice:.4f} accuracy={m.pixel_accuracy:.4f}\n"
        return report_text.encode('utf-8')


pdf_generator = EvaluationPDFGenerator()
