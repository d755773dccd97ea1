// Bilingual UI strings. Arabic is the right-to-left default; switching
// locale flips layout direction without touching any data.

export type Locale = "arabic" | "english";

const STRINGS: Record<Locale, Record<string, string>> = {
  english: {
    app_title: "Essay scoring workspace",
    essay: "Essay",
    scoring_live: "Scoring in progress",
    run_completed: "Run completed",
    run_failed: "Run failed",
    run_partially_failed: "Run completed with failures",
    failed_cell: "failed",
    pending_cell: "…",
    refined_marker: "refined",
    derived_marker: "derived",
    wizard_general: "General information",
    wizard_prompt: "Writing prompt",
    wizard_rubrics: "Trait rubrics",
    wizard_models: "Scoring models",
    wizard_submit: "Create assignment",
    error_required: "This field is required",
    error_rubric_missing: "Select or create a rubric for this trait",
    error_out_of_range: "Value outside the trait range",
    report_download: "Download report",
    delete_run: "Delete run",
    refine: "Refine",
    stars: "stars",
  },
  arabic: {
    app_title: "منصة تقييم المقالات",
    essay: "المقال",
    scoring_live: "التقييم جار",
    run_completed: "اكتمل التقييم",
    run_failed: "فشل التقييم",
    run_partially_failed: "اكتمل التقييم مع إخفاقات",
    failed_cell: "فشل",
    pending_cell: "…",
    refined_marker: "معدل يدويا",
    derived_marker: "محتسب",
    wizard_general: "معلومات عامة",
    wizard_prompt: "موضوع الكتابة",
    wizard_rubrics: "سلالم تقدير السمات",
    wizard_models: "نماذج التقييم",
    wizard_submit: "إنشاء الواجب",
    error_required: "هذا الحقل مطلوب",
    error_rubric_missing: "اختر أو أنشئ سلم تقدير لهذه السمة",
    error_out_of_range: "القيمة خارج نطاق السمة",
    report_download: "تنزيل التقرير",
    delete_run: "حذف التقييم",
    refine: "تعديل",
    stars: "نجوم",
  },
};

export function t(locale: Locale, key: string): string {
  return STRINGS[locale][key] ?? key;
}

export function dir(locale: Locale): "rtl" | "ltr" {
  return locale === "arabic" ? "rtl" : "ltr";
}
