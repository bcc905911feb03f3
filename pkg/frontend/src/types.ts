export interface QueryHit {
  record_id: string;
  score: number;
  class_id: string;
  patent_id: string;
  grant_date: string;
  /** true/false for record queries, null for raw-vector queries */
  class_match: boolean | null;
}

export interface QueryResponse {
  query_record_id: string | null;
  cutoff_date: string;
  k: number;
  hits: QueryHit[];
}

export interface RecordDetail {
  record_id: string;
  patent_id: string;
  class_id: string;
  grant_date: string;
  object_name: string;
  perspective: string;
  description: string;
  split: string;
  texts: string[];
  image_url: string;
}

export interface TaskInfo {
  task_id: string;
  record_id: string;
}

export interface SessionSubmission {
  participant_id: string;
  task_id: string;
  satisfaction: number;
  started_at: string;
  submitted_at: string;
  duration_seconds: number;
  requery_count: number;
  timer_restarted: boolean;
}

export interface StudyProgress {
  participant_id: string;
  submitted_task_ids: string[];
}

export interface MetricComparison {
  mean_A: number;
  mean_B: number;
  t: number;
  df: number;
  p_two_tailed: number;
}

export interface StudyReport {
  participants: number;
  session_counts: { A: number; B: number };
  satisfaction: MetricComparison;
  duration_seconds: MetricComparison;
}

export interface SearchOptions {
  k?: number;
  cutoffDate?: string;
  /** ad-hoc comparisons only; never set in study mode */
  variant?: string;
  participantId?: string;
  taskId?: string;
}
